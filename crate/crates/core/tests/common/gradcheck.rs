//! Central finite-difference gradient checks in float64.

use candle_core::{DType, Device, Tensor, Var};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use vtg_core::backbone::{dual_lora_linear, Lora};
use vtg_core::head::{HeadConfig, ReweightMode, TemporalHead};
use vtg_core::nn::{self, frozen_matmul, Linear, ParamStore};
use vtg_core::objectives::{
    boundary_loss, indicator_loss, indicator_loss_logits, smooth_l1, text_loss, total_loss_tensor, LossWeights,
};
use vtg_core::Segment;

pub const STEP: f64 = 1e-6;
pub const REL_TOL: f64 = 1e-4;
/// Gradients smaller than this are compared against it instead of their own
/// magnitude, so round-off on near-zero entries is not read as relative error.
pub const FLOOR: f64 = 1e-4;
pub const INSTANCES: u64 = 20;
const COORDS: usize = 6;

#[derive(Debug, Default)]
pub struct Report {
    pub checks: usize,
    pub worst: f64,
    pub failures: Vec<String>,
}

impl Report {
    pub fn merge(&mut self, o: Report) {
        self.checks += o.checks;
        self.worst = self.worst.max(o.worst);
        self.failures.extend(o.failures);
    }

    pub fn ok(&self) -> bool {
        self.failures.is_empty() && self.checks > 0
    }
}

pub fn randn(rng: &mut ChaCha8Rng, shape: &[usize], std: f64) -> Tensor {
    let n: usize = shape.iter().product();
    let v: Vec<f64> = (0..n).map(|_| rng.random_range(-1.0..1.0) * std * 1.7).collect();
    Tensor::from_vec(v, shape, &Device::Cpu).unwrap()
}

pub fn var(rng: &mut ChaCha8Rng, shape: &[usize], std: f64) -> Var {
    Var::from_tensor(&randn(rng, shape, std)).unwrap()
}

fn scalar(t: &Tensor) -> f64 {
    t.to_dtype(DType::F64).unwrap().to_scalar::<f64>().unwrap()
}

/// Compares `backward` against central differences on a few random
/// coordinates of every variable.
pub fn check(name: &str, seed: u64, vars: &[(&str, &Var)], f: &dyn Fn() -> Tensor) -> Report {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5151);
    let mut r = Report::default();
    let loss = f();
    let grads = loss.backward().unwrap();
    for (vname, v) in vars {
        let shape = v.shape().clone();
        let base: Vec<f64> = v.as_tensor().flatten_all().unwrap().to_vec1().unwrap();
        let analytic: Vec<f64> = match grads.get(v.as_tensor()) {
            Some(g) => g.flatten_all().unwrap().to_vec1().unwrap(),
            None => vec![0.0; base.len()],
        };
        let picks: Vec<usize> = if base.len() <= COORDS {
            (0..base.len()).collect()
        } else {
            (0..COORDS).map(|_| rng.random_range(0..base.len())).collect()
        };
        for i in picks {
            let mut plus = base.clone();
            plus[i] += STEP;
            v.set(&Tensor::from_vec(plus, &shape, &Device::Cpu).unwrap()).unwrap();
            let fp = scalar(&f());
            let mut minus = base.clone();
            minus[i] -= STEP;
            v.set(&Tensor::from_vec(minus, &shape, &Device::Cpu).unwrap()).unwrap();
            let fm = scalar(&f());
            v.set(&Tensor::from_vec(base.clone(), &shape, &Device::Cpu).unwrap()).unwrap();
            let numeric = (fp - fm) / (2.0 * STEP);
            let a = analytic[i];
            let rel = (a - numeric).abs() / a.abs().max(numeric.abs()).max(FLOOR);
            r.checks += 1;
            r.worst = r.worst.max(rel);
            if rel > REL_TOL {
                r.failures.push(format!(
                    "{name} seed {seed} {vname}[{i}]: analytic {a:.9e} numeric {numeric:.9e} rel {rel:.2e}"
                ));
            }
        }
    }
    r
}

/// Weighted sum so every output element contributes a distinct gradient.
fn project(t: &Tensor, rng: &mut ChaCha8Rng) -> Tensor {
    let w = randn(rng, t.dims(), 1.0);
    (t * w).unwrap().sum_all().unwrap()
}

pub fn text_loss_suite() -> Report {
    let mut r = Report::default();
    for seed in 0..INSTANCES {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (n, v) = (rng.random_range(2..6), rng.random_range(3..9));
        let logits = var(&mut rng, &[n, v], 2.0);
        let targets: Vec<u32> = (0..n).map(|_| rng.random_range(0..v as u32)).collect();
        let mut mask: Vec<bool> = (0..n).map(|_| rng.random_bool(0.7)).collect();
        mask[0] = true;
        r.merge(check("text_loss", seed, &[("logits", &logits)], &|| {
            text_loss(logits.as_tensor(), &targets, &mask).unwrap()
        }));
    }
    r
}

fn random_gt(rng: &mut ChaCha8Rng, n: usize) -> Segment {
    let s = rng.random_range(0.0..(n as f64 - 2.0));
    let e = rng.random_range(s + 0.5..(n as f64 - 1.0));
    Segment::new(s, e)
}

pub fn indicator_suite() -> Report {
    let mut r = Report::default();
    for seed in 0..INSTANCES {
        let mut rng = ChaCha8Rng::seed_from_u64(100 + seed);
        let n = rng.random_range(4..12);
        let gt = random_gt(&mut rng, n);
        let labels = vtg_core::objectives::fg_labels(&gt, n);
        let z = var(&mut rng, &[n], 2.0);
        r.merge(check("indicator_loss_logits", seed, &[("z", &z)], &|| {
            indicator_loss_logits(z.as_tensor(), &labels).unwrap()
        }));
        r.merge(check("indicator_loss", seed, &[("z", &z)], &|| {
            indicator_loss(&nn::sigmoid(z.as_tensor()).unwrap(), &labels).unwrap()
        }));
    }
    r
}

pub fn boundary_suite() -> Report {
    let mut r = Report::default();
    for seed in 0..INSTANCES {
        let mut rng = ChaCha8Rng::seed_from_u64(200 + seed);
        let n = rng.random_range(5..14);
        let gt = random_gt(&mut rng, n);
        let off = Var::from_tensor(&(randn(&mut rng, &[n, 2], 2.0).abs().unwrap() + 0.3).unwrap()).unwrap();
        r.merge(check("boundary_l1", seed, &[("offsets", &off)], &|| {
            boundary_loss(off.as_tensor(), &gt).unwrap().0
        }));
        r.merge(check("boundary_giou", seed, &[("offsets", &off)], &|| {
            boundary_loss(off.as_tensor(), &gt).unwrap().1
        }));
        let res = var(&mut rng, &[n], 2.5);
        r.merge(check("smooth_l1", seed, &[("r", &res)], &|| {
            smooth_l1(res.as_tensor()).unwrap().sum_all().unwrap()
        }));
        let parts: Vec<Var> = (0..4).map(|_| var(&mut rng, &[], 1.0)).collect();
        let w = LossWeights {
            text: rng.random_range(0.0..2.0),
            l1: rng.random_range(0.0..2.0),
            iou: rng.random_range(0.0..2.0),
        };
        let named: Vec<(&str, &Var)> = ["text", "ce", "l1", "giou"].into_iter().zip(parts.iter()).collect();
        r.merge(check("total_loss", seed, &named, &|| {
            total_loss_tensor(
                parts[0].as_tensor(),
                parts[1].as_tensor(),
                parts[2].as_tensor(),
                parts[3].as_tensor(),
                &w,
            )
            .unwrap()
        }));
    }
    r
}

pub fn adapter_suite() -> Report {
    let mut r = Report::default();
    for seed in 0..INSTANCES {
        let mut rng = ChaCha8Rng::seed_from_u64(300 + seed);
        let (rows, din, dout) = (rng.random_range(3..7), rng.random_range(2..6), rng.random_range(2..6));
        let (rt, rs) = (rng.random_range(1..4), rng.random_range(1..4));
        let x = var(&mut rng, &[1, rows, din], 1.0);
        let w = randn(&mut rng, &[din, dout], 0.5);
        let b = randn(&mut rng, &[dout], 0.5);
        let (ta, tb) = (var(&mut rng, &[din, rt], 0.5), var(&mut rng, &[rt, dout], 0.5));
        let (sa, sb) = (var(&mut rng, &[din, rs], 0.5), var(&mut rng, &[rs, dout], 0.5));
        let t: Vec<f64> = (0..rows).map(|i| if i < rows / 2 { 1.0 } else { 0.0 }).collect();
        let t_mask = Tensor::from_vec(t, (1, rows, 1), &Device::Cpu).unwrap();
        let s_mask = (1.0 - &t_mask).unwrap();
        let proj = randn(&mut rng, &[1, rows, dout], 1.0);
        let f = || {
            let base = Linear {
                w: w.clone(),
                b: Some(b.clone()),
                frozen: true,
            };
            let lt = Lora {
                a: ta.as_tensor().clone(),
                b: tb.as_tensor().clone(),
                scale: 2.0,
            };
            let ls = Lora {
                a: sa.as_tensor().clone(),
                b: sb.as_tensor().clone(),
                scale: 0.5,
            };
            let y = dual_lora_linear(x.as_tensor(), &base, Some(&lt), Some(&ls), &t_mask, &s_mask).unwrap();
            (y * &proj).unwrap().sum_all().unwrap()
        };
        r.merge(check(
            "dual_lora_linear",
            seed,
            &[("x", &x), ("lora_t.a", &ta), ("lora_t.b", &tb), ("lora_s.a", &sa), ("lora_s.b", &sb)],
            &f,
        ));
        let w2 = randn(&mut rng, &[din, dout], 0.5);
        r.merge(check("frozen_matmul", seed, &[("x", &x)], &|| {
            let mut prng = ChaCha8Rng::seed_from_u64(seed);
            project(&frozen_matmul(x.as_tensor(), &w2).unwrap(), &mut prng)
        }));
    }
    r
}

/// Every trainable head parameter plus both inputs, per reweight mode.
pub fn head_suite() -> Report {
    let mut r = Report::default();
    for seed in 0..INSTANCES {
        for mode in [ReweightMode::Add, ReweightMode::Concat, ReweightMode::SelfAtten] {
            let mut rng = ChaCha8Rng::seed_from_u64(400 + seed);
            let (p, n, d) = (rng.random_range(1..3), rng.random_range(4..9), 4);
            let cfg = HeadConfig {
                mode,
                seed,
                ..HeadConfig::default()
            };
            let mut store = ParamStore::new();
            TemporalHead::register(&cfg, d, &mut store, DType::F64).unwrap();
            // Non-zero starts so every branch carries gradient.
            for name in store.names() {
                let t = store.get(&name).unwrap();
                if t.sum_all().unwrap().abs().unwrap().to_scalar::<f64>().unwrap() == 0.0 {
                    store.set(&name, &randn(&mut rng, t.dims(), 0.3)).unwrap();
                }
            }
            let x = var(&mut rng, &[p, n, d], 1.0);
            let h = var(&mut rng, &[p, d], 1.0);
            let gts: Vec<Segment> = (0..p).map(|_| random_gt(&mut rng, n)).collect();
            let wz = randn(&mut rng, &[p, n], 1.0);
            let trainable: Vec<(String, Var)> = store.trainable().map(|(k, v)| (k.clone(), v.clone())).collect();
            let mut vars: Vec<(&str, &Var)> = vec![("x_t", &x), ("h", &h)];
            vars.extend(trainable.iter().map(|(k, v)| (k.as_str(), v)));
            let name = format!("head/{mode:?}");
            r.merge(check(&name, seed, &vars, &|| {
                let head = TemporalHead::from_store(&cfg, &store).unwrap();
                let (z, off) = head.forward(x.as_tensor(), h.as_tensor()).unwrap();
                let mut total = (z.tanh().unwrap() * &wz).unwrap().sum_all().unwrap();
                for (k, gt) in gts.iter().enumerate() {
                    let labels = vtg_core::objectives::fg_labels(gt, n);
                    let ce = indicator_loss_logits(&z.get(k).unwrap(), &labels).unwrap();
                    let (l1, giou) = boundary_loss(&off.get(k).unwrap(), gt).unwrap();
                    total = (total + ((ce + l1).unwrap() + giou).unwrap()).unwrap();
                }
                total
            }));
            let head = TemporalHead::from_store(&cfg, &store).unwrap();
            r.merge(check(&format!("project_loc/{mode:?}"), seed, &[("h", &h)], &|| {
                let mut prng = ChaCha8Rng::seed_from_u64(seed);
                project(&head.project_loc(h.as_tensor()).unwrap(), &mut prng)
            }));
            let hl = randn(&mut rng, &[p, d], 1.0);
            r.merge(check(&format!("reweight/{mode:?}"), seed, &[("x_t", &x)], &|| {
                let mut prng = ChaCha8Rng::seed_from_u64(seed);
                project(&head.reweight(x.as_tensor(), &hl).unwrap(), &mut prng)
            }));
            r.merge(check(&format!("indicator/{mode:?}"), seed, &[("x", &x)], &|| {
                let mut prng = ChaCha8Rng::seed_from_u64(seed);
                project(&head.indicator(x.as_tensor()).unwrap(), &mut prng)
            }));
            r.merge(check(&format!("boundary/{mode:?}"), seed, &[("x", &x)], &|| {
                let mut prng = ChaCha8Rng::seed_from_u64(seed);
                project(&head.boundary(x.as_tensor()).unwrap(), &mut prng)
            }));
        }
    }
    r
}

pub fn all() -> Vec<(&'static str, Report)> {
    vec![
        ("text loss", text_loss_suite()),
        ("indicator losses", indicator_suite()),
        ("boundary and total losses", boundary_suite()),
        ("adapter routing", adapter_suite()),
        ("temporal head", head_suite()),
    ]
}
