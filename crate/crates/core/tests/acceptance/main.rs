//! Acceptance suite. Prints one PASS/FAIL line per criterion and exits
//! non-zero if any criterion fails. Tolerances are fixed below.

mod reference;

use std::collections::BTreeMap;
use std::process::ExitCode;
use std::time::{Duration, Instant};

use mixlaw_core::dlc::{
    extract_features, features_from_lookup, k_value, DlcFeatures, DomainSets, KRepr, KRepresentation,
};
use mixlaw_core::fitter::{self, metrics, FitConfig, FitResult, Problem};
use mixlaw_core::ingest::{synthesize_curves, SynthDesign};
use mixlaw_core::laws::{ChinchillaParams, CrossDomainParams, DcptParams, LawId, LawParams};
use mixlaw_core::model::{curves_to_points, tokens_from_steps, CorpusSide, DataPoint, LossCurve, Sample, TrainConfig};
use mixlaw_core::solvers::{
    allocate, allocate_from_constants, limited_data_loss, limited_data_optimal_ratio, tradeoff_feasible,
    tradeoff_optimal_ratio, LimitedDataRequest, TradeoffRequest,
};
use mixlaw_core::validation::{
    apply_schedule, domain_holdout, kfold_dataset_size, kfold_mixture_ratio, kfold_model_size, SamplingSchedule,
    ScheduleTag,
};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use reference::Reference;

const D_MIN: f64 = 0.131072;
/// Starts per fit in the CV protocols; the recovery criterion uses the
/// default cap.
const CV_STARTS: usize = 100;

/// Generator for the synthetic fixtures.
fn generator() -> DcptParams {
    DcptParams { e: 0.5, a: 0.4, b: 0.3, c: 1.9, alpha: 0.3, beta: 0.25, gamma: 0.5, eta: 1.5, epsilon: 0.1 }
}

const SIZES: [f64; 3] = [0.5, 1.8, 4.0];
const RATIOS: [f64; 9] = [0.1, 0.2, 0.33, 0.4, 0.5, 0.6, 0.67, 0.8, 0.9];

fn points_from(law: &DcptParams, design: SynthDesign) -> Vec<DataPoint> {
    let g = LawParams::L3(*law);
    let curves = synthesize_curves(&g, &g, &design, &TrainConfig::default()).unwrap();
    curves_to_points(&curves, CorpusSide::Domain, &TrainConfig::default())
}

fn train_design(noise: f64, seed: u64) -> SynthDesign {
    SynthDesign {
        domain_name: "synthetic".into(),
        model_sizes: SIZES.to_vec(),
        domain_ratios: RATIOS.to_vec(),
        eval_steps: (1..=20).map(|i| i * 1000).collect(),
        noise_rel_std: noise,
        seed,
    }
}

fn heldout_design(noise: f64, seed: u64) -> SynthDesign {
    SynthDesign {
        domain_name: "synthetic".into(),
        model_sizes: vec![1.0, 3.0],
        domain_ratios: vec![0.25, 0.45, 0.75],
        eval_steps: (0..10).map(|i| 1500 + 2000 * i).collect(),
        noise_rel_std: noise,
        seed,
    }
}

struct Outcome {
    pass: bool,
    detail: String,
}

fn outcome(pass: bool, detail: String) -> Outcome {
    Outcome { pass, detail }
}

struct Shared {
    fits: Vec<FitResult>,
    domain_r2: Option<f64>,
}

fn c1_recovery(shared: &mut Shared) -> Outcome {
    let cfg = FitConfig::default();
    let law = generator();
    let limit = Duration::from_secs(300);

    let t = Instant::now();
    let clean = fitter::fit(LawId::L3, &points_from(&law, train_design(0.0, 0)), &cfg).unwrap();
    let t_clean = t.elapsed();
    let clean_r2 = metrics(&clean.law, &points_from(&law, heldout_design(0.0, 0)), cfg.delta).unwrap().r2;

    let t = Instant::now();
    let noisy = fitter::fit(LawId::L3, &points_from(&law, train_design(0.005, 11)), &cfg).unwrap();
    let t_noisy = t.elapsed();
    let noisy_r2 = metrics(&noisy.law, &points_from(&law, heldout_design(0.005, 12)), cfg.delta).unwrap().r2;

    let pass =
        clean_r2 >= 0.9999 && clean.objective <= 1e-6 && noisy_r2 >= 0.99 && t_clean <= limit && t_noisy <= limit;
    let detail = format!(
        "noiseless R2={clean_r2:.7} huber={:.2e} ({:.1?}); 0.5% noise R2={noisy_r2:.5} ({:.1?}); {} starts",
        clean.objective,
        t_clean,
        t_noisy,
        clean.starts.len()
    );
    shared.fits.push(clean);
    shared.fits.push(noisy);
    outcome(pass, detail)
}

fn rel(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs())
}

fn c2_chinchilla(shared: &mut Shared) -> Outcome {
    let mut worst: f64 = 0.0;
    for fit in &shared.fits {
        let LawParams::L3(p) = fit.law else { unreachable!() };
        for r0 in [0.0, 0.1, 0.37, 0.5, 0.93, 1.0] {
            let ch = p.reduce_to_chinchilla(r0).unwrap();
            for i in 0..10 {
                for j in 0..10 {
                    let n = 0.1 * 1.8f64.powi(i);
                    let d = D_MIN * 1.7f64.powi(j);
                    worst = worst.max(rel(p.evaluate(n, d, r0).unwrap(), ch.evaluate(n, d)));
                }
            }
        }
    }
    outcome(
        worst < 1e-12 && !shared.fits.is_empty(),
        format!("max relative error {worst:.2e} over fitted laws, 6 ratios, 10x10 grid"),
    )
}

/// Minimizes `A/N^alpha + B/D^beta` along `6 N D 1e18 = budget` by golden
/// section in `log N`.
fn numeric_allocation(p: &ChinchillaParams, budget: f64) -> f64 {
    let c = budget / 6e18;
    let f = |x: f64| p.a * (-p.alpha * x).exp() + p.b * (c / x.exp()).powf(-p.beta);
    let (mut lo, mut hi) = (-40.0f64, 40.0f64);
    let phi = 0.5 * (5f64.sqrt() - 1.0);
    for _ in 0..300 {
        let x1 = hi - phi * (hi - lo);
        let x2 = lo + phi * (hi - lo);
        if f(x1) < f(x2) {
            hi = x2;
        } else {
            lo = x1;
        }
    }
    (0.5 * (lo + hi)).exp()
}

fn c3_allocation(_: &mut Shared) -> Outcome {
    let r = allocate_from_constants(4.1282, 0.6252, 0.3748, 5e19).unwrap();
    let example = rel(r.n_opt, 15.54) < 5e-3 && rel(r.d_opt, 0.536) < 5e-3;
    let budget_err = rel(6.0 * r.n_opt * r.d_opt * 1e18, 5e19);

    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let mut worst: f64 = 0.0;
    for _ in 0..50 {
        let p = ChinchillaParams {
            e: rng.random_range(0.5..2.0),
            a: rng.random_range(0.1..10.0),
            b: rng.random_range(0.1..10.0),
            alpha: rng.random_range(0.1..0.8),
            beta: rng.random_range(0.1..0.8),
        };
        let budget = 10f64.powf(rng.random_range(18.0..24.0));
        let a = allocate(&p, budget).unwrap();
        worst = worst.max(rel(a.n_opt, numeric_allocation(&p, budget)));
    }
    outcome(
        example && budget_err < 1e-12 && worst < 1e-3,
        format!(
            "N_opt={:.3} D_opt={:.4}; budget error {budget_err:.1e}; worst gap to numeric optimum {worst:.1e} over 50 draws",
            r.n_opt, r.d_opt
        ),
    )
}

fn c4_usage1_check(_: &mut Shared) -> Outcome {
    let lg0 = 2.8602;
    let ok_row = tradeoff_feasible(2.9458, lg0, 0.03);
    let bad_row = tradeoff_feasible(2.9644, lg0, 0.03);
    let inc = |lg: f64| 100.0 * (lg - lg0) / lg0;
    let shown = (format!("{:.2}", inc(2.9458)), format!("{:.2}", inc(2.9644)));
    outcome(
        ok_row && !bad_row && shown == ("2.99".into(), "3.64".into()),
        format!("2.9458 -> {}% feasible={ok_row}; 2.9644 -> {}% feasible={bad_row}", shown.0, shown.1),
    )
}

fn random_law(rng: &mut ChaCha8Rng) -> DcptParams {
    let mut p = DcptParams {
        e: rng.random_range(0.2..1.5),
        a: rng.random_range(0.1..1.0),
        b: rng.random_range(0.1..1.0),
        c: 0.0,
        alpha: rng.random_range(0.1..0.6),
        beta: rng.random_range(0.1..0.6),
        gamma: rng.random_range(0.1..1.0),
        eta: rng.random_range(1.05..3.0),
        epsilon: rng.random_range(0.01..0.5),
    };
    p.c = p.c0_bound(D_MIN).unwrap() * rng.random_range(1.05..2.0);
    p
}

fn c5_solvers(_: &mut Shared) -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let (mut gap1, mut gap2): (f64, f64) = (0.0, 0.0);
    let mut monotone = true;
    let mut convex = true;
    let mut interior = 0;
    for _ in 0..20 {
        let general = random_law(&mut rng);
        let domain = random_law(&mut rng);
        let n0 = rng.random_range(0.5..5.0);
        let d0 = rng.random_range(1.0..20.0);

        let lg = |rd: f64| general.evaluate(n0, d0, 1.0 - rd).unwrap();
        let ld = |rd: f64| domain.evaluate(n0, d0, rd).unwrap();
        let lg0 = lg(0.0);
        let t = (lg(rng.random_range(0.2..0.95)) - lg0) / lg0;
        let res = tradeoff_optimal_ratio(&TradeoffRequest { general_law: general, domain_law: domain, n0, d0, lg0, t })
            .unwrap();
        let scan = (0..=10_000)
            .map(|i| i as f64 * 1e-4)
            .filter(|&rd| tradeoff_feasible(lg(rd), lg0, t))
            .fold(f64::NEG_INFINITY, f64::max);
        gap1 = gap1.max((res.r_d - scan).abs());
        for i in 0..1000 {
            let (a, b) = (i as f64 * 1e-3, (i + 1) as f64 * 1e-3);
            monotone &= lg(b) > lg(a) && ld(b) < ld(a);
        }

        // a token supply inside the window where an interior optimum exists
        let p = domain;
        let lower = (p.b * p.eta * (1.0 + p.epsilon).powf(p.gamma + 1.0) / (p.gamma * p.c)).powf(1.0 / p.beta);
        let dd0 = lower * ((p.eta + p.beta) / p.eta).powf(rng.random_range(0.1..0.9) / p.beta);
        let res = limited_data_optimal_ratio(&LimitedDataRequest { domain_law: p, n0, dd0 }).unwrap();
        interior += usize::from(!res.boundary);
        let f = |r: f64| limited_data_loss(&p, n0, dd0, r).unwrap();
        let (mut best, mut arg) = (f64::INFINITY, 0.0);
        for i in 1..=10_000 {
            let r = i as f64 * 1e-4;
            if f(r) < best {
                best = f(r);
                arg = r;
            }
        }
        gap2 = gap2.max((res.r_d - arg).abs());
        for i in 2..999 {
            let r = i as f64 * 1e-3;
            convex &= f(r - 1e-3) - 2.0 * f(r) + f(r + 1e-3) > 0.0;
        }
    }
    outcome(
        gap1 <= 2e-4 && gap2 <= 2e-4 && monotone && convex && interior == 20,
        format!("usage-1 gap {gap1:.1e}, usage-2 gap {gap2:.1e} ({interior}/20 interior); monotone={monotone} convex={convex}"),
    )
}

fn fd_agrees(problem: &Problem, reference: &mut Reference, v: &[f64]) -> (bool, f64) {
    let g = problem.gradient(v).unwrap();
    let mut worst: f64 = 0.0;
    for (k, &gk) in g.iter().enumerate() {
        if gk.abs() <= 1e-10 {
            continue;
        }
        let fd = reference.central_difference(v, k);
        worst = worst.max((gk - fd).abs() / gk.abs());
    }
    (worst < 1e-5, worst)
}

fn random_reparam(rng: &mut ChaCha8Rng) -> Vec<f64> {
    vec![
        rng.random_range(-1.0..2.0),
        rng.random_range(-1.0..2.0),
        rng.random_range(-1.0..2.0),
        rng.random_range(-1.0..2.0),
        rng.random_range(0.1..0.8),
        rng.random_range(0.1..0.8),
        rng.random_range(0.2f64.ln()..2f64.ln()),
        rng.random_range(-1.0..1.0),
        rng.random_range(0.01..0.9),
    ]
}

fn c6_gradient(_: &mut Shared) -> Outcome {
    let pts = points_from(&generator(), train_design(0.02, 6));
    let d_min = pts.iter().map(|p| p.d).fold(f64::INFINITY, f64::min);
    let l3 = Problem::new(LawId::L3, &pts, d_min, 1e-3).unwrap();

    let feats = vec![
        DlcFeatures { k1: 2.1, k2: 0.4, k3: -0.05 },
        DlcFeatures { k1: 2.9, k2: 0.7, k3: -0.08 },
        DlcFeatures { k1: 3.4, k2: 0.2, k3: -0.1 },
    ];
    let groups: Vec<u32> = (0..pts.len()).map(|i| (i % 3) as u32).collect();
    let cross = Problem::cross_domain(KRepr::K4, &pts, &groups, feats.clone(), d_min, 1e-3).unwrap();
    let mut l3_ref = Reference::new(&pts, &groups, Vec::new(), d_min, 1e-3);
    let mut cross_ref = Reference::new(&pts, &groups, feats, d_min, 1e-3);

    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let (mut fails, mut worst) = (0, 0.0f64);
    for _ in 0..100 {
        let v = random_reparam(&mut rng);
        let (ok, w) = fd_agrees(&l3, &mut l3_ref, &v);
        fails += usize::from(!ok);
        worst = worst.max(w);

        let mut v = v;
        v.extend([
            rng.random_range(-1.0..1.0),
            rng.random_range(0.2..1.5),
            rng.random_range(0.5..4.0),
            rng.random_range(0.1..2.0),
            rng.random_range(-0.004..0.004),
        ]);
        let (ok, w) = fd_agrees(&cross, &mut cross_ref, &v);
        fails += usize::from(!ok);
        worst = worst.max(w);
    }
    outcome(fails == 0, format!("{fails} of 200 vectors disagree; worst relative error {worst:.1e}"))
}

fn c7_trends(shared: &mut Shared) -> Outcome {
    let mut checked = 0;
    let mut bad = 0;
    for fit in &shared.fits {
        let LawParams::L3(p) = fit.law else { unreachable!() };
        if !p.check_constraints(fit.d_min).all_ok() {
            continue;
        }
        checked += 1;
        for i in 0..12 {
            let n = 0.1 * 1.6f64.powi(i);
            for j in 0..25 {
                let d = fit.d_min * 1.3f64.powi(j);
                for k in 1..=40 {
                    let r = k as f64 * 0.025;
                    let (dn, dd, dr) = p.partials(n, d, r).unwrap();
                    let m = p.mixed_partial_dr_dd(n, d, r).unwrap();
                    bad += usize::from(!(dn < 0.0 && dd < 0.0 && dr < 0.0 && m < 0.0));
                }
            }
        }
    }
    outcome(
        checked == shared.fits.len() && checked > 0 && bad == 0,
        format!("{checked} fitted laws satisfy the constraints; {bad} grid points violate a trend"),
    )
}

fn probe_curve(level: f64, drop: f64, tau: f64) -> LossCurve {
    LossCurve {
        domain_name: "probe".into(),
        n: 1.8,
        r_domain: 1.0,
        samples: (0..=200)
            .map(|i| {
                let step = i * 100;
                let l = level + drop * (-(step as f64) / tau).exp();
                Sample { step, loss_general: l + 0.5, loss_domain: l }
            })
            .collect(),
    }
}

fn domain_fixture() -> DomainSets {
    let cross = CrossDomainParams { base: generator(), f: 0.5, mu: 1.0, k: KRepresentation::k1(2.0) };
    let probes = [
        (1.4, 2.0, 3000.0),
        (1.9, 1.5, 4000.0),
        (2.3, 2.5, 2500.0),
        (2.6, 1.0, 5000.0),
        (3.0, 2.2, 3500.0),
        (3.4, 1.8, 4500.0),
    ];
    let mut out = BTreeMap::new();
    for (i, &(level, drop, tau)) in probes.iter().enumerate() {
        let feats = extract_features(&probe_curve(level, drop, tau), CorpusSide::Domain).unwrap();
        let k = k_value(&cross.k, &feats).unwrap();
        let law = cross.derive_domain_law(k).unwrap();
        let design = SynthDesign {
            domain_name: format!("domain{i}"),
            model_sizes: SIZES.to_vec(),
            domain_ratios: vec![0.1, 0.33, 0.5, 0.67, 0.9],
            eval_steps: (1..=10).map(|s| 2000 * s).collect(),
            noise_rel_std: 0.0,
            seed: 0,
        };
        out.insert(format!("domain{i}"), (points_from(&law, design), feats));
    }
    out
}

fn c8_cv(shared: &mut Shared) -> Outcome {
    let cfg = FitConfig { max_grid_candidates: Some(CV_STARTS), ..FitConfig::default() };
    let pts = points_from(&generator(), train_design(0.0, 0));
    let model = kfold_model_size(&pts, LawId::L3, &cfg).unwrap();
    let data = kfold_dataset_size(&pts, LawId::L3, &cfg).unwrap();
    let mix = kfold_mixture_ratio(&pts, LawId::L3, &cfg).unwrap();
    let dom = domain_holdout(&domain_fixture(), KRepr::K1, &cfg).unwrap();
    shared.domain_r2 = Some(dom.mean_r2);
    let counts = (model.splits.len(), data.splits.len(), mix.splits.len(), dom.splits.len());
    let r2 = [model.mean_r2, data.mean_r2, mix.mean_r2, dom.mean_r2];
    outcome(
        counts == (3, 3, 36, 15) && r2.iter().all(|&r| r >= 0.999),
        format!(
            "splits model/dataset/mixture/domain = {}/{}/{}/{}; mean R2 = {:.6}/{:.6}/{:.6}/{:.6}",
            counts.0, counts.1, counts.2, counts.3, r2[0], r2[1], r2[2], r2[3]
        ),
    )
}

fn c9_schedules(_: &mut Shared) -> Outcome {
    let curve = probe_curve(2.0, 1.0, 3000.0);
    let kept = |tag| {
        let out = apply_schedule(&curve, &SamplingSchedule::new(tag)).unwrap();
        out.samples.into_iter().filter(|s| s.step > 0).collect::<Vec<_>>()
    };
    let counts: Vec<usize> = [ScheduleTag::M1, ScheduleTag::M2, ScheduleTag::M3, ScheduleTag::M4]
        .into_iter()
        .map(|t| kept(t).len())
        .collect();
    let m4 = kept(ScheduleTag::M4);
    let early = m4.iter().filter(|s| s.step <= 100 * 100).count() as f64 / m4.len() as f64;
    outcome(
        counts == [200, 40, 40, 45] && early >= 0.6,
        format!("retained {counts:?}; M4 first-half share {:.0}%", 100.0 * early),
    )
}

fn c10_dlc(shared: &mut Shared) -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(10);
    let mut worst: f64 = 0.0;
    for _ in 0..200 {
        let l: Vec<f64> = (0..12).map(|_| rng.random_range(0.5..6.0)).collect();
        let f = features_from_lookup(|s| Some(l[(s / 1000) as usize])).unwrap();
        let telescoped = ((l[11] - l[10]) - (l[1] - l[0])) / 10.0;
        worst = worst.max((f.k3 - telescoped).abs());
    }
    let linear = LossCurve {
        domain_name: "lin".into(),
        n: 1.0,
        r_domain: 1.0,
        samples: (0..=20)
            .map(|i| Sample { step: i * 1000, loss_general: 5.0 - 0.1 * i as f64, loss_domain: 5.0 - 0.1 * i as f64 })
            .collect(),
    };
    let lin = extract_features(&linear, CorpusSide::Domain).unwrap();

    let curve = probe_curve(2.0, 1.0, 3000.0);
    let mut reads = 0;
    features_from_lookup(|s| {
        reads += 1;
        curve.sample_at(s).map(|x| x.loss_domain)
    })
    .unwrap();

    let dom_r2 = shared.domain_r2.unwrap_or(f64::NAN);
    outcome(
        worst <= 1e-12 && lin.k3.abs() <= 1e-12 && reads <= 12 && dom_r2 >= 0.99,
        format!(
            "telescoping error {worst:.1e}; linear k3 {:.1e}; {reads} samples read; domain holdout R2 {dom_r2:.6}",
            lin.k3
        ),
    )
}

fn c11_constants(_: &mut Shared) -> Outcome {
    let d = tokens_from_steps(1000, &TrainConfig::default());
    outcome((d - 0.131072).abs() < 1e-15 && rel(d, 0.1311) < 1e-3, format!("1000 steps -> {d} B-tokens"))
}

type Criterion = (&'static str, fn(&mut Shared) -> Outcome);

fn main() -> ExitCode {
    let criteria: [Criterion; 11] = [
        ("synthetic L3 recovery", c1_recovery),
        ("Chinchilla consistency identity", c2_chinchilla),
        ("allocation worked example and numeric oracle", c3_allocation),
        ("usage-1 feasibility arithmetic", c4_usage1_check),
        ("solvers vs brute-force scans", c5_solvers),
        ("objective gradient vs finite differences", c6_gradient),
        ("trend properties of fitted laws", c7_trends),
        ("cross-validation split counts and R2", c8_cv),
        ("sampling schedules", c9_schedules),
        ("learnability feature identities", c10_dlc),
        ("step/token conversion", c11_constants),
    ];
    let mut shared = Shared { fits: Vec::new(), domain_r2: None };
    // optional criterion numbers on the command line select a subset
    let only: Vec<usize> = std::env::args().skip(1).filter_map(|a| a.parse().ok()).collect();
    let mut failed = 0;
    let mut ran = 0;
    for (i, (name, run)) in criteria.iter().enumerate() {
        if !only.is_empty() && !only.contains(&(i + 1)) {
            continue;
        }
        ran += 1;
        let t = Instant::now();
        let o = run(&mut shared);
        println!(
            "criterion {:>2} {} {name}: {} [{:.1?}]",
            i + 1,
            if o.pass { "PASS" } else { "FAIL" },
            o.detail,
            t.elapsed()
        );
        failed += usize::from(!o.pass);
    }
    println!("acceptance: {} passed, {failed} failed", ran - failed);
    if failed == 0 {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}
