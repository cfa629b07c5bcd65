use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error, PartialEq)]
pub enum ParamError {
    #[error("parameter `{name}` must be strictly positive, got {value}")]
    NotPositive { name: &'static str, value: f64 },
    #[error("parameter `{name}` must be at least {min}, got {value}")]
    TooSmall { name: &'static str, min: usize, value: usize },
    #[error("search_cols_far ({far}) must not be smaller than search_cols_near ({near})")]
    SearchRegion { near: usize, far: usize },
    #[error("range `{name}` is empty: [{lo}, {hi}]")]
    EmptyRange { name: &'static str, lo: f64, hi: f64 },
}

/// Every threshold used by ground segmentation and clustering.
///
/// Defaults reproduce the published parameter settings: a 5-packet buffer,
/// `t_alpha = 0.5`, `t_delta_rho = 2 m`, 20-column fitting blocks,
/// `t_p2line = 0.2 m`, `t_ccl = 1 m`, a 5/10 column search region split at
/// 20 m, `t_neighbour = 5`, the third minimum mutual distance and
/// `t_merge = 0.8 m`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SegParams {
    /// Slope above which a point starts an obstacle (change point).
    pub t_alpha: f64,
    /// Horizontal range jump, meters, that breaks a change-follow run.
    pub t_delta_rho: f64,
    /// Columns per line-fitting block.
    pub block_size_b: usize,
    /// Point-to-line vertical distance, meters, separating ground from obstacle.
    pub t_p2line: f64,
    /// Horizontal range difference, meters, for CCL connectivity.
    pub t_ccl: f64,
    pub search_cols_near: usize,
    pub search_cols_far: usize,
    /// Horizontal range, meters, at which the far search region applies.
    pub near_far_range: f64,
    /// Maximum number of gap columns for the neighbour linkage.
    pub t_neighbour: usize,
    /// Rank of the mutual point distance used as the cluster distance.
    pub mutual_n: usize,
    pub t_merge: f64,
    pub buffer_packets: usize,
    /// Height of the virtual ground point below the sensor, meters (negative).
    pub virtual_point_z: f64,
    pub line_slope_range: [f64; 2],
    /// Valid intercepts; `None` means `virtual_point_z ± 0.5 m`.
    pub line_intercept_range: Option<[f64; 2]>,
    /// Clusters with fewer points are reported as noise.
    pub min_cluster_points: usize,
    /// Cross-buffer refinement of initial clusters.
    pub refinement: bool,
}

impl Default for SegParams {
    fn default() -> Self {
        Self {
            t_alpha: 0.5,
            t_delta_rho: 2.0,
            block_size_b: 20,
            t_p2line: 0.2,
            t_ccl: 1.0,
            search_cols_near: 5,
            search_cols_far: 10,
            near_far_range: 20.0,
            t_neighbour: 5,
            mutual_n: 3,
            t_merge: 0.8,
            buffer_packets: 5,
            virtual_point_z: -2.0,
            line_slope_range: [-0.2, 0.2],
            line_intercept_range: None,
            min_cluster_points: 3,
            refinement: true,
        }
    }
}

pub(crate) const INTERCEPT_MARGIN: f64 = 0.5;

impl SegParams {
    pub fn intercept_range(&self) -> [f64; 2] {
        self.line_intercept_range.unwrap_or([
            self.virtual_point_z - INTERCEPT_MARGIN,
            self.virtual_point_z + INTERCEPT_MARGIN,
        ])
    }

    /// Columns a cluster must trail the sweep by before no future point or
    /// neighbour linkage can reach it.
    pub fn closure_horizon(&self) -> usize {
        self.search_cols_far.max(self.t_neighbour)
    }

    pub fn search_cols_for(&self, rho_xy: f64) -> usize {
        if rho_xy < self.near_far_range {
            self.search_cols_near
        } else {
            self.search_cols_far
        }
    }

    pub fn validate(&self) -> Result<(), ParamError> {
        let positive = [
            ("t_alpha", self.t_alpha),
            ("t_delta_rho", self.t_delta_rho),
            ("t_p2line", self.t_p2line),
            ("t_ccl", self.t_ccl),
            ("near_far_range", self.near_far_range),
            ("t_merge", self.t_merge),
        ];
        for (name, value) in positive {
            if !(value > 0.0) || !value.is_finite() {
                return Err(ParamError::NotPositive { name, value });
            }
        }
        let counts = [
            ("block_size_b", self.block_size_b),
            ("search_cols_near", self.search_cols_near),
            ("search_cols_far", self.search_cols_far),
            ("t_neighbour", self.t_neighbour),
            ("mutual_n", self.mutual_n),
            ("buffer_packets", self.buffer_packets),
            ("min_cluster_points", self.min_cluster_points),
        ];
        for (name, value) in counts {
            if value < 1 {
                return Err(ParamError::TooSmall { name, min: 1, value });
            }
        }
        if self.search_cols_far < self.search_cols_near {
            return Err(ParamError::SearchRegion {
                near: self.search_cols_near,
                far: self.search_cols_far,
            });
        }
        let [lo, hi] = self.line_slope_range;
        if !(lo <= hi) {
            return Err(ParamError::EmptyRange { name: "line_slope_range", lo, hi });
        }
        let [lo, hi] = self.intercept_range();
        if !(lo <= hi) {
            return Err(ParamError::EmptyRange { name: "line_intercept_range", lo, hi });
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_are_valid() {
        let p = SegParams::default();
        p.validate().unwrap();
        assert_eq!(p.intercept_range(), [-2.5, -1.5]);
        assert_eq!(p.closure_horizon(), 10);
    }

    #[test]
    fn search_region_switches_at_twenty_meters() {
        let p = SegParams::default();
        assert_eq!(p.search_cols_for(19.99), 5);
        assert_eq!(p.search_cols_for(20.0), 10);
        assert_eq!(p.search_cols_for(25.0), 10);
    }

    #[test]
    fn rejects_bad_values() {
        let p = SegParams { t_merge: 0.0, ..Default::default() };
        assert!(matches!(p.validate(), Err(ParamError::NotPositive { name: "t_merge", .. })));
        let p = SegParams { mutual_n: 0, ..Default::default() };
        assert!(matches!(p.validate(), Err(ParamError::TooSmall { name: "mutual_n", .. })));
        let p = SegParams { search_cols_far: 3, ..Default::default() };
        assert!(matches!(p.validate(), Err(ParamError::SearchRegion { .. })));
        let p = SegParams { t_alpha: f64::NAN, ..Default::default() };
        assert!(p.validate().is_err());
    }

    #[test]
    fn partial_toml_keeps_defaults() {
        let p: SegParams = toml::from_str("t_merge = 0.5\nrefinement = false\n").unwrap();
        assert_eq!(p.t_merge, 0.5);
        assert!(!p.refinement);
        assert_eq!(p.t_ccl, 1.0);
        assert!(toml::from_str::<SegParams>("bogus = 1").is_err());
    }
}
