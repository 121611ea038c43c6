//! Central finite-difference checks of analytic gradients.

use std::collections::BTreeMap;

use crate::data::generate;
use crate::error::{Error, Result};
use crate::model::{ModelConfig, Trainer};
use crate::params::ParamStore;
use crate::tensor::{Graph, Tensor, Var};

pub const FD_STEP: f64 = 1e-6;
/// Denominator floor for relative errors, so gradients near zero are
/// compared on an absolute scale of `floor · tolerance`.
pub const REL_FLOOR: f64 = 1e-4;
pub const MODEL_TOLERANCE: f64 = 1e-4;

/// `|a − n| / max(|a|, |n|, floor)`.
pub fn relative_error(analytic: f64, numeric: f64, floor: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(floor)
}

/// Worst relative error between backward and central differences for a
/// scalar function of the given leaf tensors.
pub fn check_function<F>(inputs: &[Tensor], f: F, step: f64, floor: f64) -> Result<f64>
where
    F: Fn(&mut Graph, &[Var]) -> Result<Var>,
{
    let eval = |vals: &[Tensor]| -> Result<f64> {
        let mut g = Graph::new();
        let vars: Vec<Var> = vals.iter().map(|t| g.leaf(t.clone())).collect();
        let out = f(&mut g, &vars)?;
        Ok(g.item(out))
    };
    let mut g = Graph::new();
    let vars: Vec<Var> = inputs
        .iter()
        .map(|t| g.leaf(t.clone().with_grad()))
        .collect();
    let out = f(&mut g, &vars)?;
    let grads = g.backward(out)?;
    let mut worst: f64 = 0.0;
    let mut work = inputs.to_vec();
    for (i, v) in vars.iter().enumerate() {
        let analytic = grads
            .get(*v)
            .map(<[f64]>::to_vec)
            .unwrap_or_else(|| vec![0.0; inputs[i].numel()]);
        for (j, a) in analytic.iter().enumerate() {
            let orig = work[i].data()[j];
            work[i].data_mut()[j] = orig + step;
            let plus = eval(&work)?;
            work[i].data_mut()[j] = orig - step;
            let minus = eval(&work)?;
            work[i].data_mut()[j] = orig;
            let numeric = (plus - minus) / (2.0 * step);
            worst = worst.max(relative_error(*a, numeric, floor));
        }
    }
    Ok(worst)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GradcheckOptions {
    pub seed: u64,
    pub step: f64,
    pub floor: f64,
    pub tolerance: f64,
    /// Flips the sign of the largest analytic gradient entry; a negative control.
    pub sabotage: bool,
}

impl Default for GradcheckOptions {
    fn default() -> Self {
        Self {
            seed: 0,
            step: FD_STEP,
            floor: REL_FLOOR,
            tolerance: MODEL_TOLERANCE,
            sabotage: false,
        }
    }
}

/// Worst agreement found within one parameter group or loss branch.
#[derive(Debug, Clone, PartialEq)]
pub struct GroupResult {
    pub name: String,
    pub max_rel_err: f64,
    /// `parameter[index]` of the worst entry.
    pub worst: String,
    pub checked: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct GradcheckReport {
    /// Total-loss gradients, one row per parameter group.
    pub groups: Vec<GroupResult>,
    /// Contrastive-only and reconstruction-only gradients over all parameters.
    pub branches: Vec<GroupResult>,
    pub tolerance: f64,
}

impl GradcheckReport {
    pub fn rows(&self) -> impl Iterator<Item = &GroupResult> {
        self.groups.iter().chain(&self.branches)
    }

    pub fn passed(&self) -> bool {
        self.rows().all(|r| r.max_rel_err < self.tolerance)
    }

    pub fn worst(&self) -> Option<&GroupResult> {
        self.rows()
            .max_by(|a, b| a.max_rel_err.total_cmp(&b.max_rel_err))
    }
}

/// Group of a parameter: the name up to its first dot.
pub fn param_group(name: &str) -> &str {
    name.split('.').next().unwrap_or(name)
}

fn analytic(
    trainer: &Trainer,
    store: &ParamStore,
    data: &[crate::data::AlignedTriplet],
    masks: &[Vec<bool>],
    branch: usize,
) -> Result<Vec<Vec<f64>>> {
    let (g, con, recon, total) = trainer.build_loss(store, data, masks)?;
    let target = [total, con, recon][branch];
    let grads = g.backward(target)?;
    let mut s = store.clone();
    s.zero_grad();
    s.accumulate(&grads);
    Ok(s.iter()
        .map(|(_, t)| t.grad.clone().unwrap_or_else(|| vec![0.0; t.numel()]))
        .collect())
}

fn accumulate(into: &mut GroupResult, rel: f64, label: impl FnOnce() -> String) {
    into.checked += 1;
    if rel > into.max_rel_err || into.worst.is_empty() {
        into.max_rel_err = rel;
        into.worst = label();
    }
}

fn empty(name: &str) -> GroupResult {
    GroupResult {
        name: name.to_string(),
        max_rel_err: 0.0,
        worst: String::new(),
        checked: 0,
    }
}

/// Checks every weight of the model for `cfg` on a seeded two-class batch:
/// the total loss per parameter group, and each loss branch separately.
pub fn gradcheck_model(cfg: &ModelConfig, opts: &GradcheckOptions) -> Result<GradcheckReport> {
    let mut cfg = cfg.clone();
    cfg.seed = opts.seed;
    cfg.validate()?;
    let trainer = Trainer::new(&cfg)?;
    let data = generate(cfg.batch_size, 2, cfg.lores_px, opts.seed)?;
    let masks = trainer.step_masks(data.len(), cfg.lores_tokens());
    let store = trainer.state.store.clone();

    let mut branch_grads = [
        analytic(&trainer, &store, &data, &masks, 0)?,
        analytic(&trainer, &store, &data, &masks, 1)?,
        analytic(&trainer, &store, &data, &masks, 2)?,
    ];
    if opts.sabotage {
        let (mut bi, mut bj, mut best) = (0, 0, -1.0);
        for (i, g) in branch_grads[0].iter().enumerate() {
            for (j, v) in g.iter().enumerate() {
                if v.abs() > best {
                    (bi, bj, best) = (i, j, v.abs());
                }
            }
        }
        branch_grads[0][bi][bj] = -branch_grads[0][bi][bj];
    }

    let names: Vec<String> = store.iter().map(|(n, _)| n.to_string()).collect();
    let mut groups: BTreeMap<String, GroupResult> = BTreeMap::new();
    let mut order = Vec::new();
    for n in &names {
        let gname = param_group(n).to_string();
        if !groups.contains_key(&gname) {
            order.push(gname.clone());
            groups.insert(gname.clone(), empty(&gname));
        }
    }
    let mut branches = [empty("loss.contrastive"), empty("loss.reconstruction")];

    let mut work = store.clone();
    let ids: Vec<_> = work.ids().collect();
    for (pi, id) in ids.iter().enumerate() {
        // `work` is perturbed in place, so the element index drives the loop.
        #[allow(clippy::needless_range_loop)]
        for j in 0..work.get(*id).numel() {
            let orig = work.get(*id).data()[j];
            work.get_mut(*id).data_mut()[j] = orig + opts.step;
            let plus = eval_losses(&trainer, &work, &data, &masks)?;
            work.get_mut(*id).data_mut()[j] = orig - opts.step;
            let minus = eval_losses(&trainer, &work, &data, &masks)?;
            work.get_mut(*id).data_mut()[j] = orig;
            let numeric: [f64; 3] =
                std::array::from_fn(|b| (plus[b] - minus[b]) / (2.0 * opts.step));
            let label = || format!("{}[{j}]", names[pi]);
            let group = groups.get_mut(param_group(&names[pi])).expect("registered");
            accumulate(
                group,
                relative_error(branch_grads[0][pi][j], numeric[0], opts.floor),
                label,
            );
            for (b, branch) in branches.iter_mut().enumerate() {
                accumulate(
                    branch,
                    relative_error(branch_grads[b + 1][pi][j], numeric[b + 1], opts.floor),
                    label,
                );
            }
        }
    }
    if order.is_empty() {
        return Err(Error::contract("model has no parameters to check"));
    }
    Ok(GradcheckReport {
        groups: order.iter().map(|n| groups[n].clone()).collect(),
        branches: branches.to_vec(),
        tolerance: opts.tolerance,
    })
}

fn eval_losses(
    trainer: &Trainer,
    store: &ParamStore,
    data: &[crate::data::AlignedTriplet],
    masks: &[Vec<bool>],
) -> Result<[f64; 3]> {
    let (g, con, recon, total) = trainer.build_loss(store, data, masks)?;
    Ok([g.item(total), g.item(con), g.item(recon)])
}
