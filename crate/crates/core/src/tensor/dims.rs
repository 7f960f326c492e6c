use crate::error::{invalid, shape_err, Result};

/// One axis of the activation layout `batch × channel × height × width`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Axis {
    Batch,
    Channel,
    Height,
    Width,
}

impl Axis {
    fn index(self) -> usize {
        self as usize
    }
}

/// The set of axes a statistic is taken over.
///
/// When `group` is set the channel axis is split into groups of `group`
/// consecutive channels and the statistic is taken within each group.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct DimSet {
    axes: [bool; 4],
    group: Option<usize>,
}

/// How to view a 4-D tensor so a `DimSet` becomes a plain keepdim reduction.
#[derive(Clone, Debug, PartialEq)]
pub(crate) struct ReducePlan {
    pub view: Vec<usize>,
    pub axes: Vec<usize>,
    pub count: usize,
    pub grouped: bool,
}

impl DimSet {
    pub fn new(axes: &[Axis]) -> Result<Self> {
        if axes.is_empty() {
            return invalid("a dimension set must not be empty");
        }
        let mut set = [false; 4];
        for a in axes {
            set[a.index()] = true;
        }
        Ok(Self {
            axes: set,
            group: None,
        })
    }

    /// `{b, x}`: batch and spatial, one statistic per channel.
    pub fn batch_spatial() -> Self {
        Self {
            axes: [true, false, true, true],
            group: None,
        }
    }

    /// `{c, x}`: one statistic per sample.
    pub fn channel_spatial() -> Self {
        Self {
            axes: [false, true, true, true],
            group: None,
        }
    }

    /// `{x}`: one statistic per sample and channel.
    pub fn spatial() -> Self {
        Self {
            axes: [false, false, true, true],
            group: None,
        }
    }

    /// `{c/g, x}`: one statistic per sample and group of `group_size` channels.
    pub fn grouped(group_size: usize) -> Self {
        Self {
            axes: [false, true, true, true],
            group: Some(group_size),
        }
    }

    pub fn contains(&self, axis: Axis) -> bool {
        self.axes[axis.index()]
    }

    pub fn group_size(&self) -> Option<usize> {
        self.group
    }

    pub(crate) fn plan(&self, shape: &[usize]) -> Result<ReducePlan> {
        if shape.len() != 4 {
            return shape_err(format!("expected a 4-D activation tensor, got {shape:?}"));
        }
        let [n, c, h, w] = [shape[0], shape[1], shape[2], shape[3]];
        match self.group {
            None => {
                let axes: Vec<usize> = (0..4).filter(|&i| self.axes[i]).collect();
                let count = axes.iter().map(|&i| shape[i]).product();
                Ok(ReducePlan {
                    view: shape.to_vec(),
                    axes,
                    count,
                    grouped: false,
                })
            }
            Some(g) => {
                if g == 0 || c % g != 0 {
                    return invalid(format!("group size {g} does not divide {c} channels"));
                }
                if !self.axes[1] {
                    return invalid("a grouped dimension set must include the channel axis");
                }
                if self.axes[2] != self.axes[3] {
                    return invalid(
                        "a grouped dimension set must take both spatial axes or neither",
                    );
                }
                let mut axes = Vec::new();
                if self.axes[0] {
                    axes.push(0);
                }
                axes.push(2);
                if self.axes[2] {
                    axes.push(3);
                }
                let view = vec![n, c / g, g, h * w];
                let count = axes.iter().map(|&i| view[i]).product();
                Ok(ReducePlan {
                    view,
                    axes,
                    count,
                    grouped: true,
                })
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_set_rejected() {
        assert!(DimSet::new(&[]).is_err());
    }

    #[test]
    fn group_must_divide_channels() {
        assert!(DimSet::grouped(3).plan(&[2, 8, 4, 4]).is_err());
        let p = DimSet::grouped(4).plan(&[2, 8, 4, 4]).unwrap();
        assert_eq!(p.view, vec![2, 2, 4, 16]);
        assert_eq!(p.count, 64);
    }

    #[test]
    fn plain_plan_counts() {
        let p = DimSet::batch_spatial().plan(&[3, 5, 2, 2]).unwrap();
        assert_eq!(p.axes, vec![0, 2, 3]);
        assert_eq!(p.count, 12);
    }
}
