//! Expert-collapse detection on per-step top-1 loads.

use serde::{Deserialize, Serialize};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CollapseConfig {
    /// Share of tokens above which a step counts as collapsed.
    pub share: f64,
    /// Consecutive collapsed steps on the same expert before warning.
    pub patience: usize,
}

impl Default for CollapseConfig {
    fn default() -> Self {
        CollapseConfig {
            share: 0.95,
            patience: 50,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CollapseWarning {
    pub step: usize,
    pub layer: usize,
    pub expert: usize,
    pub streak: usize,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct CollapseDetector {
    pub cfg: CollapseConfig,
    /// `(layer, expert, streak)` per MoE layer.
    pub streaks: Vec<(usize, usize, usize)>,
}

impl CollapseDetector {
    pub fn new(cfg: CollapseConfig) -> Self {
        CollapseDetector { cfg, streaks: Vec::new() }
    }

    /// Feeds one step of `(layer, per-expert token counts)`. Warns on every
    /// step whose streak has reached the patience.
    pub fn update(&mut self, step: usize, loads: &[(usize, Vec<usize>)]) -> Vec<CollapseWarning> {
        let mut out = Vec::new();
        for (layer, counts) in loads {
            if counts.len() < 2 {
                continue;
            }
            let total: usize = counts.iter().sum();
            let (expert, &top) = counts
                .iter()
                .enumerate()
                .fold((0, &0), |acc, (e, c)| if *c > *acc.1 { (e, c) } else { acc });
            let collapsed = total > 0 && top as f64 > self.cfg.share * total as f64;
            let entry = match self.streaks.iter_mut().find(|s| s.0 == *layer) {
                Some(e) => e,
                None => {
                    self.streaks.push((*layer, expert, 0));
                    self.streaks.last_mut().expect("pushed")
                }
            };
            if !collapsed {
                entry.2 = 0;
                continue;
            }
            if entry.1 != expert {
                entry.1 = expert;
                entry.2 = 0;
            }
            entry.2 += 1;
            if entry.2 >= self.cfg.patience {
                out.push(CollapseWarning {
                    step,
                    layer: *layer,
                    expert,
                    streak: entry.2,
                });
            }
        }
        out
    }
}
