//! Exact block-diagonal curvature oracles.
//!
//! The ground truth every Kronecker approximation is measured against:
//! per layer ℓ the dense `P_ℓ × P_ℓ` matrix `Σ_t Jᵀ Λ J` assembled from
//! full per-row Jacobians, with no Kronecker factorisation anywhere.
//! A second oracle built from finite-difference Jacobians cross-checks
//! the analytic one, and exhaustive label enumeration provides the
//! Fisher for the equivalence checks.

use crate::error::{Error, Result};
use crate::net::{
    backward_jacobians, forward, Batch, Capture, LossKind, ModelSpec, PreactJacobian,
};
use crate::rng::Substream;
use crate::tensor::Tensor;

/// Hessian of the per-term loss w.r.t. the model output row.
pub fn loss_hessian(loss: &LossKind, f: &[f64]) -> Result<Tensor> {
    match loss {
        LossKind::Gaussian { sigma } => {
            if sigma.rows() != f.len() {
                return Err(Error::Dimension(format!(
                    "loss covariance is {}x{} but the output has {} coordinates",
                    sigma.rows(),
                    sigma.cols(),
                    f.len()
                )));
            }
            sigma.solve_spd(&Tensor::identity(sigma.rows()))
        }
        LossKind::Categorical { classes } => {
            if *classes != f.len() {
                return Err(Error::Dimension(
                    "output width does not match class count".into(),
                ));
            }
            let p = crate::net::softmax_probs(f);
            Ok(Tensor::from_fn(*classes, *classes, |i, j| {
                let d = if i == j { p[i] } else { 0.0 };
                d - p[i] * p[j]
            }))
        }
    }
}

/// Transposed per-row Jacobian `J_{θ_ℓ}(x)ᵣᵀ = Σₘ aₘ ⊗ b(r, m)` as a
/// dense `P_ℓ × C` matrix. Parameters are vectorised column-major over
/// `W (P_out × P_in)`, i.e. entry `(j·P_out + p, i)`.
pub fn jacobian_transpose(capture: &Capture, jac: &PreactJacobian, r: usize) -> Tensor {
    let p_in = capture.a.cols();
    let p_out = jac.p_out;
    let c = jac.classes;
    let mut out = Tensor::zeros(&[p_in * p_out, c]);
    for m in 0..jac.in_rows {
        let a = capture.a.row(m);
        for (j, &aj) in a.iter().enumerate() {
            if aj == 0.0 {
                continue;
            }
            for p in 0..p_out {
                for i in 0..c {
                    out.add_at(j * p_out + p, i, aj * jac.at(r, m, p, i));
                }
            }
        }
    }
    out
}

/// Exact block GGN per weight matrix: `Σₙ Σᵣ Jᵀ Λ J` over every loss
/// term of the batch.
pub fn exact_block_ggn(model: &ModelSpec, batch: &Batch) -> Result<Vec<Tensor>> {
    let tape = forward(model, batch)?;
    let jacs = backward_jacobians(model, &tape)?;
    let params = model.param_layers();
    let mut blocks = Vec::with_capacity(params.len());
    for (k, _) in params.iter().enumerate() {
        let mut block: Option<Tensor> = None;
        for (n, output) in tape.outputs.iter().enumerate() {
            let cap = &tape.captures[k][n];
            let jac = &jacs[k][n];
            for r in 0..output.rows() {
                let lam = loss_hessian(&model.loss, output.row(r))?;
                let jt = jacobian_transpose(cap, jac, r);
                let term = jt.matmul(&lam)?.matmul(&jt.transpose())?;
                block = Some(match block {
                    None => term,
                    Some(acc) => acc.add(&term)?,
                });
            }
        }
        blocks.push(block.expect("batch is non-empty"));
    }
    Ok(blocks)
}

/// Independent oracle: the same sandwich with Jacobians taken by central
/// finite differences on the weight entries.
pub fn exact_block_ggn_fd(model: &ModelSpec, batch: &Batch, eps: f64) -> Result<Vec<Tensor>> {
    let params = model.param_layers();
    let base_tape = forward(model, batch)?;
    let mut blocks = Vec::with_capacity(params.len());
    for info in &params {
        let p_l = info.param_count();
        let mut block = Tensor::zeros(&[p_l, p_l]);
        // per-term transposed Jacobians, fd column by fd column
        let mut jts: Vec<Tensor> = base_tape
            .outputs
            .iter()
            .map(|o| Tensor::zeros(&[p_l, o.rows() * o.cols()]))
            .collect();
        let mut probe = model.clone();
        for j in 0..info.p_in {
            for p in 0..info.p_out {
                let col = j * info.p_out + p;
                let w = probe.weight_mut(info.layer, info.part);
                let orig = w.at(p, j);
                w.set(p, j, orig + eps);
                let plus = forward(&probe, batch)?;
                let w = probe.weight_mut(info.layer, info.part);
                w.set(p, j, orig - eps);
                let minus = forward(&probe, batch)?;
                let w = probe.weight_mut(info.layer, info.part);
                w.set(p, j, orig);
                for (n, jt) in jts.iter_mut().enumerate() {
                    let fp = &plus.outputs[n];
                    let fm = &minus.outputs[n];
                    for r in 0..fp.rows() {
                        for i in 0..fp.cols() {
                            let d = (fp.at(r, i) - fm.at(r, i)) / (2.0 * eps);
                            jt.set(col, r * fp.cols() + i, d);
                        }
                    }
                }
            }
        }
        for (n, output) in base_tape.outputs.iter().enumerate() {
            let c = output.cols();
            for r in 0..output.rows() {
                let lam = loss_hessian(&model.loss, output.row(r))?;
                let jt_r = Tensor::from_fn(p_l, c, |row, i| jts[n].at(row, r * c + i));
                let term = jt_r.matmul(&lam)?.matmul(&jt_r.transpose())?;
                block = block.add(&term)?;
            }
        }
        blocks.push(block);
    }
    Ok(blocks)
}

/// Exact Fisher per weight matrix via the gradient outer-product form.
/// Categorical terms enumerate every label; Gaussian terms use the
/// closed-form label expectation.
pub fn exact_block_fisher(model: &ModelSpec, batch: &Batch) -> Result<Vec<Tensor>> {
    let tape = forward(model, batch)?;
    let jacs = backward_jacobians(model, &tape)?;
    let params = model.param_layers();
    let mut blocks = Vec::with_capacity(params.len());
    for (k, info) in params.iter().enumerate() {
        let p_l = info.param_count();
        let mut block = Tensor::zeros(&[p_l, p_l]);
        for (n, output) in tape.outputs.iter().enumerate() {
            let cap = &tape.captures[k][n];
            let jac = &jacs[k][n];
            for r in 0..output.rows() {
                let jt = jacobian_transpose(cap, jac, r);
                match &model.loss {
                    LossKind::Categorical { classes } => {
                        let p = crate::net::softmax_probs(output.row(r));
                        for y in 0..*classes {
                            let mut gout = p.clone();
                            gout[y] -= 1.0;
                            let g = apply_columns(&jt, &gout);
                            block.add_outer_scaled(&g, &g, p[y]);
                        }
                    }
                    LossKind::Gaussian { sigma } => {
                        // gradient covariance E[∇ℓ ∇ℓᵀ] = Σ⁻¹ E[(y−f)(y−f)ᵀ] Σ⁻¹
                        // with the label expectation E[(y−f)(y−f)ᵀ] = Σ inserted
                        // analytically, evaluated as two explicit solves
                        let resid_cov = sigma.solve_spd(sigma)?;
                        let grad_cov = sigma.solve_spd(&resid_cov.transpose())?;
                        let term = jt.matmul(&grad_cov)?.matmul(&jt.transpose())?;
                        let term = term.add(&term.transpose())?.scale(0.5);
                        block = block.add(&term)?;
                    }
                }
            }
        }
        blocks.push(block);
    }
    Ok(blocks)
}

/// Monte-Carlo Fisher: average of `S` per-term rank-1 gradient outer
/// products with labels drawn from the model's own predictive.
pub fn exact_block_fisher_mc_limit(
    model: &ModelSpec,
    batch: &Batch,
    samples: usize,
    seed: u64,
) -> Result<Vec<Tensor>> {
    if samples < 1 {
        return Err(Error::Argument("sample count must be >= 1".into()));
    }
    let tape = forward(model, batch)?;
    let jacs = backward_jacobians(model, &tape)?;
    let params = model.param_layers();
    let mut stream = Substream::new(seed, "curvature/mc-fisher");
    let mut blocks: Vec<Tensor> = params
        .iter()
        .map(|info| Tensor::zeros(&[info.param_count(), info.param_count()]))
        .collect();
    let scale = 1.0 / samples as f64;
    for (n, output) in tape.outputs.iter().enumerate() {
        for r in 0..output.rows() {
            for _ in 0..samples {
                let gout =
                    crate::net::sampled_loss_gradient(&model.loss, output.row(r), &mut stream)?;
                for (k, block) in blocks.iter_mut().enumerate() {
                    let jt = jacobian_transpose(&tape.captures[k][n], &jacs[k][n], r);
                    let g = apply_columns(&jt, &gout);
                    block.add_outer_scaled(&g, &g, scale);
                }
            }
        }
    }
    Ok(blocks)
}

fn apply_columns(jt: &Tensor, v: &[f64]) -> Vec<f64> {
    let (rows, cols) = (jt.rows(), jt.cols());
    debug_assert_eq!(cols, v.len());
    let mut out = vec![0.0; rows];
    for (r, o) in out.iter_mut().enumerate() {
        let row = jt.row(r);
        let mut sum = 0.0;
        for (a, b) in row.iter().zip(v) {
            sum += a * b;
        }
        *o = sum;
    }
    out
}

/// Smallest eigenvalue, for PSD assertions in tests.
pub fn min_eigenvalue(m: &Tensor) -> Result<f64> {
    Ok(m.sym_eig()?.eigenvalues[0])
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::net::{deep_linear_model, ExampleInput, Labels, Setting};
    use crate::tensor::rel_frobenius;

    fn random_matrix(rows: usize, cols: usize, s: &mut Substream) -> Tensor {
        Tensor::from_fn(rows, cols, |_, _| s.standard_normal())
    }

    #[test]
    fn gaussian_identity_hessian_is_identity() {
        let loss = LossKind::Gaussian {
            sigma: Tensor::identity(3),
        };
        let lam = loss_hessian(&loss, &[0.1, 0.2, 0.3]).unwrap();
        assert!(rel_frobenius(&lam, &Tensor::identity(3)) < 1e-12);
    }

    #[test]
    fn categorical_two_class_balanced() {
        let loss = LossKind::Categorical { classes: 2 };
        let lam = loss_hessian(&loss, &[0.7, 0.7]).unwrap();
        let want = Tensor::matrix(2, 2, vec![0.25, -0.25, -0.25, 0.25]).unwrap();
        assert!(rel_frobenius(&lam, &want) < 1e-12);
    }

    #[test]
    fn categorical_hessian_matches_finite_differences() {
        let loss = LossKind::Categorical { classes: 3 };
        let f = [0.3, -0.8, 0.5];
        let lam = loss_hessian(&loss, &f).unwrap();
        // central differences of the gradient p(f) − e_y are label-free on
        // the Hessian since ∇²(−log softmax)_y = diag(p) − ppᵀ for any y
        let eps = 1e-5;
        for i in 0..3 {
            for j in 0..3 {
                let mut fp = f;
                fp[j] += eps;
                let mut fm = f;
                fm[j] -= eps;
                let gp = crate::net::softmax_probs(&fp);
                let gm = crate::net::softmax_probs(&fm);
                let fd = (gp[i] - gm[i]) / (2.0 * eps);
                assert!(
                    (lam.at(i, j) - fd).abs() < 1e-6,
                    "entry ({i},{j}): {} vs {fd}",
                    lam.at(i, j)
                );
            }
        }
    }

    #[test]
    fn rank_one_case_is_kron_of_input_and_identity() {
        // one example, one row, single dense layer, unit Gaussian:
        // GGN = (a aᵀ) ⊗ I_C
        let mut s = Substream::new(3, "curv/rank1");
        let w = random_matrix(2, 3, &mut s);
        let model = deep_linear_model(
            vec![w],
            LossKind::Gaussian {
                sigma: Tensor::identity(2),
            },
            Setting::Expand,
        )
        .unwrap();
        let x = random_matrix(1, 3, &mut s);
        let batch = Batch {
            inputs: vec![ExampleInput::Matrix(x.clone())],
            labels: Labels::Gaussian(vec![random_matrix(1, 2, &mut s)]),
        };
        let ggn = exact_block_ggn(&model, &batch).unwrap();
        let a = Tensor::matrix(3, 1, x.row(0).to_vec()).unwrap();
        let want = a
            .matmul(&a.transpose())
            .unwrap()
            .kron(&Tensor::identity(2))
            .unwrap();
        assert!(rel_frobenius(&ggn[0], &want) < 1e-12);
    }

    #[test]
    fn blocks_are_symmetric_psd() {
        let mut s = Substream::new(8, "curv/psd");
        let w1 = random_matrix(4, 3, &mut s);
        let w2 = random_matrix(2, 4, &mut s);
        let model = deep_linear_model(
            vec![w1, w2],
            LossKind::Categorical { classes: 2 },
            Setting::Expand,
        )
        .unwrap();
        let inputs: Vec<ExampleInput> = (0..3)
            .map(|_| ExampleInput::Matrix(random_matrix(2, 3, &mut s)))
            .collect();
        let labels = Labels::Categorical(vec![vec![0, 1], vec![1, 0], vec![0, 0]]);
        let batch = Batch { inputs, labels };
        for block in exact_block_ggn(&model, &batch).unwrap() {
            assert!(rel_frobenius(&block, &block.transpose()) < 1e-12);
            let min = min_eigenvalue(&block).unwrap();
            assert!(min >= -1e-9 * block.frobenius_norm());
        }
    }

    #[test]
    fn analytic_and_fd_oracles_agree_on_deep_linear() {
        let mut s = Substream::new(10, "curv/fd");
        let w1 = random_matrix(3, 3, &mut s);
        let w2 = random_matrix(2, 3, &mut s);
        let sigma_m = random_matrix(2, 2, &mut s);
        let sigma = sigma_m
            .matmul(&sigma_m.transpose())
            .unwrap()
            .add(&Tensor::identity(2))
            .unwrap();
        let model =
            deep_linear_model(vec![w1, w2], LossKind::Gaussian { sigma }, Setting::Expand).unwrap();
        let batch = Batch {
            inputs: vec![
                ExampleInput::Matrix(random_matrix(2, 3, &mut s)),
                ExampleInput::Matrix(random_matrix(2, 3, &mut s)),
            ],
            labels: Labels::Gaussian(vec![
                random_matrix(2, 2, &mut s),
                random_matrix(2, 2, &mut s),
            ]),
        };
        let analytic = exact_block_ggn(&model, &batch).unwrap();
        let fd = exact_block_ggn_fd(&model, &batch, 1e-5).unwrap();
        for (a, b) in analytic.iter().zip(&fd) {
            assert!(rel_frobenius(a, b) < 1e-5);
        }
    }

    #[test]
    fn fisher_zero_variance_when_predictive_is_deterministic() {
        // p = (1, 0) to numerical precision: sampled gradients vanish and
        // so does the loss Hessian
        let w = Tensor::matrix(2, 1, vec![40.0, -40.0]).unwrap();
        let model = deep_linear_model(
            vec![w],
            LossKind::Categorical { classes: 2 },
            Setting::Expand,
        )
        .unwrap();
        let batch = Batch {
            inputs: vec![ExampleInput::Matrix(
                Tensor::matrix(1, 1, vec![1.0]).unwrap(),
            )],
            labels: Labels::Categorical(vec![vec![0]]),
        };
        let mc = exact_block_fisher_mc_limit(&model, &batch, 32, 5).unwrap();
        assert!(mc[0].frobenius_norm() < 1e-20);
        let ggn = exact_block_ggn(&model, &batch).unwrap();
        assert!(ggn[0].frobenius_norm() < 1e-20);
    }

    #[test]
    fn two_outcome_enumeration_reproduces_loss_hessian() {
        // C=2, p=(0.5,0.5): enumerating both labels gives exactly Λ
        let model = deep_linear_model(
            vec![Tensor::matrix(2, 2, vec![0.0, 0.0, 0.0, 0.0]).unwrap()],
            LossKind::Categorical { classes: 2 },
            Setting::Expand,
        )
        .unwrap();
        let _ = &model;
        let p = [0.5, 0.5];
        let mut fisher = Tensor::zeros(&[2, 2]);
        for y in 0..2 {
            let mut g = p.to_vec();
            g[y] -= 1.0;
            fisher.add_outer_scaled(&g, &g, p[y]);
        }
        let lam = loss_hessian(&LossKind::Categorical { classes: 2 }, &[0.0, 0.0]).unwrap();
        assert!(rel_frobenius(&fisher, &lam) < 1e-12);
    }

    #[test]
    fn enumerated_fisher_equals_ggn() {
        let mut s = Substream::new(12, "curv/fisher");
        let w1 = random_matrix(3, 2, &mut s);
        let w2 = random_matrix(3, 3, &mut s);
        let model = deep_linear_model(
            vec![w1, w2],
            LossKind::Categorical { classes: 3 },
            Setting::Expand,
        )
        .unwrap();
        let batch = Batch {
            inputs: vec![
                ExampleInput::Matrix(random_matrix(2, 2, &mut s)),
                ExampleInput::Matrix(random_matrix(2, 2, &mut s)),
            ],
            labels: Labels::Categorical(vec![vec![0, 2], vec![1, 1]]),
        };
        let fisher = exact_block_fisher(&model, &batch).unwrap();
        let ggn = exact_block_ggn(&model, &batch).unwrap();
        for (f, g) in fisher.iter().zip(&ggn) {
            assert!(rel_frobenius(f, g) < 1e-9);
        }
    }

    #[test]
    fn reference_surface_dims_give_a_psd_64_block() {
        // the error-map configuration: N=4, R=2, two 8x8 layers
        let mut s = Substream::new(64, "curv/refsurface");
        let w1 = random_matrix(8, 8, &mut s);
        let w2 = random_matrix(8, 8, &mut s);
        let sigma = {
            let m = random_matrix(8, 8, &mut s);
            m.transpose()
                .matmul(&m)
                .unwrap()
                .scale(1.0 / 8.0)
                .add(&Tensor::identity(8))
                .unwrap()
        };
        let model =
            deep_linear_model(vec![w1, w2], LossKind::Gaussian { sigma }, Setting::Expand).unwrap();
        let batch = Batch {
            inputs: (0..4)
                .map(|_| ExampleInput::Matrix(random_matrix(2, 8, &mut s)))
                .collect(),
            labels: Labels::Gaussian((0..4).map(|_| random_matrix(2, 8, &mut s)).collect()),
        };
        let blocks = exact_block_ggn(&model, &batch).unwrap();
        for block in &blocks {
            assert_eq!(block.shape(), &[64, 64]);
            assert!(rel_frobenius(block, &block.transpose()) < 1e-12);
            let min = min_eigenvalue(block).unwrap();
            assert!(min >= -1e-9 * block.frobenius_norm());
        }
    }

    #[test]
    fn linear_model_block_equals_fd_hessian_of_the_loss() {
        // for a linear model with Gaussian loss the block curvature IS the
        // parameter Hessian; check against central second differences
        let mut s = Substream::new(17, "curv/quadratic");
        let w = random_matrix(2, 3, &mut s);
        let sigma_m = random_matrix(2, 2, &mut s);
        let sigma = sigma_m
            .matmul(&sigma_m.transpose())
            .unwrap()
            .add(&Tensor::identity(2))
            .unwrap();
        let model =
            deep_linear_model(vec![w], LossKind::Gaussian { sigma }, Setting::Expand).unwrap();
        let batch = Batch {
            inputs: vec![
                ExampleInput::Matrix(random_matrix(2, 3, &mut s)),
                ExampleInput::Matrix(random_matrix(1, 3, &mut s)),
            ],
            labels: Labels::Gaussian(vec![
                random_matrix(2, 2, &mut s),
                random_matrix(1, 2, &mut s),
            ]),
        };
        let ggn = exact_block_ggn(&model, &batch).unwrap();
        let info = model.param_layers()[0].clone();
        let p_l = info.param_count();
        let eps = 1e-3;
        let loss_at = |probe: &ModelSpec| -> f64 {
            let tape = forward(probe, &batch).unwrap();
            crate::net::loss_and_output_grads(probe, &tape, &batch)
                .unwrap()
                .0
        };
        let entry = |col: usize| (col % info.p_out, col / info.p_out);
        let mut hess = Tensor::zeros(&[p_l, p_l]);
        for c1 in 0..p_l {
            for c2 in 0..=c1 {
                let (p1, j1) = entry(c1);
                let (p2, j2) = entry(c2);
                let mut probe = model.clone();
                let mut eval = |s1: f64, s2: f64| {
                    let base1 = model.weight(0, crate::net::ParamPart::Main).at(p1, j1);
                    let base2 = model.weight(0, crate::net::ParamPart::Main).at(p2, j2);
                    let wm = probe.weight_mut(0, crate::net::ParamPart::Main);
                    wm.set(p1, j1, base1 + s1 * eps);
                    let shifted1 = wm.at(p2, j2);
                    wm.set(p2, j2, shifted1 + s2 * eps);
                    let v = loss_at(&probe);
                    let wm = probe.weight_mut(0, crate::net::ParamPart::Main);
                    wm.set(p1, j1, base1);
                    wm.set(p2, j2, base2);
                    v
                };
                let fd = (eval(1.0, 1.0) - eval(1.0, -1.0) - eval(-1.0, 1.0) + eval(-1.0, -1.0))
                    / (4.0 * eps * eps);
                hess.set(c1, c2, fd);
                hess.set(c2, c1, fd);
            }
        }
        assert!(rel_frobenius(&ggn[0], &hess) < 1e-5);
    }

    #[test]
    fn mc_fisher_approaches_ggn_with_many_samples() {
        let mut s = Substream::new(4, "curv/mc");
        let w = random_matrix(2, 3, &mut s).scale(0.5);
        let model = deep_linear_model(
            vec![w],
            LossKind::Categorical { classes: 2 },
            Setting::Expand,
        )
        .unwrap();
        let batch = Batch {
            inputs: vec![ExampleInput::Matrix(random_matrix(2, 3, &mut s))],
            labels: Labels::Categorical(vec![vec![0, 1]]),
        };
        let ggn = exact_block_ggn(&model, &batch).unwrap();
        let mc = exact_block_fisher_mc_limit(&model, &batch, 4000, 99).unwrap();
        assert!(rel_frobenius(&mc[0], &ggn[0]) < 0.1);
    }

    #[test]
    fn rejects_zero_samples() {
        let mut s = Substream::new(4, "curv/zero");
        let w = random_matrix(2, 3, &mut s);
        let model = deep_linear_model(
            vec![w],
            LossKind::Categorical { classes: 2 },
            Setting::Expand,
        )
        .unwrap();
        let batch = Batch {
            inputs: vec![ExampleInput::Matrix(random_matrix(1, 3, &mut s))],
            labels: Labels::Categorical(vec![vec![0]]),
        };
        assert!(matches!(
            exact_block_fisher_mc_limit(&model, &batch, 0, 1),
            Err(Error::Argument(_))
        ));
    }
}
