use std::path::PathBuf;

use metalab::context::Family;
use metalab::lab::*;

fn desk(name: &str) -> ExperimentConfig {
    let path = PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../../configs/desk").join(name);
    ExperimentConfig::load(&path).unwrap()
}

fn small(mut cfg: ExperimentConfig, lifetime: u64, period: u64) -> ExperimentConfig {
    cfg.env.lifetime = lifetime;
    cfg.env.period = period;
    cfg.agent.hidden = 16;
    if let Some(c) = &mut cfg.context {
        c.hidden = 16;
        c.history = c.history.min(10);
    }
    cfg
}

fn csv_rows(bytes: &[u8]) -> (Vec<String>, Vec<Vec<String>>) {
    let text = std::str::from_utf8(bytes).unwrap();
    let mut lines = text.lines();
    let header = lines.next().unwrap().split(',').map(str::to_string).collect();
    let rows = lines.map(|l| l.split(',').map(str::to_string).collect()).collect();
    (header, rows)
}

const DESK: [&str; 6] =
    ["ac_baseline.toml", "ac_bmg.toml", "ac_bmg_reward.toml", "q_baseline.toml", "q_bmg.toml", "q_bmg_reward.toml"];

#[test]
fn desk_configs_validate_and_round_trip() {
    for name in DESK {
        let cfg = desk(name);
        cfg.validate().unwrap_or_else(|e| panic!("{name}: {e}"));
        let text = cfg.to_toml().unwrap();
        assert_eq!(ExperimentConfig::from_toml(&text).unwrap(), cfg, "{name}");
    }
}

#[test]
fn unknown_keys_are_rejected() {
    let mut text = desk("ac_baseline.toml").to_toml().unwrap();
    text = text.replace("[agent]", "[agent]\nalpha_entt = 0.1");
    let err = ExperimentConfig::from_toml(&text).unwrap_err();
    assert!(err.to_string().contains("alpha_entt"), "{err}");
}

#[test]
fn invalid_configs_fail_before_simulation() {
    let mut cfg = desk("ac_bmg.toml");
    cfg.meta.as_mut().unwrap().k = 0;
    assert!(matches!(execute(&cfg, |_| panic!("no rows expected")), Err(LabError::Config(_))));

    let mut cfg = desk("q_baseline.toml");
    cfg.context = desk("q_bmg_reward.toml").context;
    assert!(matches!(cfg.validate(), Err(LabError::Config(m)) if m.contains("[meta]")));

    let mut cfg = desk("ac_baseline.toml");
    cfg.logging.stride = 0;
    assert!(cfg.validate().is_err());

    let mut cfg = desk("ac_bmg.toml");
    cfg.meta.as_mut().unwrap().tune = vec![metalab::metaopt::MetaParam::Epsilon];
    assert!(cfg.validate().is_err());
}

#[test]
fn candidate_lists_are_enforced_unless_overridden() {
    let mut cfg = desk("ac_baseline.toml");
    cfg.agent.alpha_ent = 0.3;
    let err = cfg.validate().unwrap_err().to_string();
    assert!(err.contains("agent.alpha_ent") && err.contains("off_grid"), "{err}");
    cfg.off_grid = true;
    cfg.validate().unwrap();

    let mut cfg = desk("q_bmg.toml");
    cfg.meta.as_mut().unwrap().l = 17;
    assert!(cfg.validate().is_err());
}

#[test]
fn baseline_smoke_run() {
    let cfg = small(desk("ac_baseline.toml"), 10_000, 100_000);
    let (summary, rows) = run_collect(&cfg).unwrap();
    assert_eq!(summary.env_steps, 10_000);
    assert_eq!(rows.last().unwrap().env_step, 10_000);
    assert!(rows.windows(2).all(|w| w[0].env_step < w[1].env_step));
    assert!(rows.iter().all(|r| r.mean_rollout_reward.is_finite() && r.cumulative_return.is_finite()));
    assert_eq!(rows.last().unwrap().cumulative_return, summary.total_return);
}

#[test]
fn same_seed_gives_identical_bytes() {
    for name in ["ac_bmg_reward.toml", "q_bmg_reward.toml"] {
        let cfg = small(desk(name), 3_000, 1_000);
        let (_, a) = run_to_bytes(&cfg).unwrap();
        let (_, b) = run_to_bytes(&cfg).unwrap();
        assert_eq!(a, b, "{name}");
        let mut other = cfg.clone();
        other.seed = 1;
        assert_ne!(run_to_bytes(&other).unwrap().1, a, "{name}");
    }
}

#[test]
fn csv_format_and_golden_headers() {
    let base = "env_step,outer_iteration,mean_rollout_reward,cumulative_return,return_per_100k";
    let probes = "probe_high,probe_increasing,probe_zero,probe_decreasing,probe_low";
    let cases = [
        ("ac_baseline.toml", format!("{base},alpha_ent,inner_loss,outer_loss,task_index")),
        ("ac_bmg.toml", format!("{base},alpha_ent,inner_loss,outer_loss,task_index")),
        ("ac_bmg_reward.toml", format!("{base},alpha_ent,inner_loss,outer_loss,{probes},task_index")),
        ("q_baseline.toml", format!("{base},epsilon,inner_loss,outer_loss,task_index")),
        ("q_bmg_reward.toml", format!("{base},epsilon,inner_loss,outer_loss,{probes},task_index")),
    ];
    for (name, want) in cases {
        let cfg = small(desk(name), 200, 100);
        let (_, bytes) = run_to_bytes(&cfg).unwrap();
        let text = String::from_utf8(bytes).unwrap();
        assert!(!text.contains('\r'));
        assert!(text.ends_with('\n'));
        assert_eq!(text.lines().next().unwrap(), want, "{name}");
        let ncol = want.split(',').count();
        assert!(text.lines().all(|l| l.split(',').count() == ncol), "{name}");
    }
    let mut cfg = desk("ac_bmg.toml");
    cfg.meta.as_mut().unwrap().tune =
        vec![metalab::metaopt::MetaParam::AlphaEnt, metalab::metaopt::MetaParam::AlphaL2];
    assert_eq!(
        Schema::of(&cfg).header().join(","),
        format!("{base},alpha_ent,alpha_l2,inner_loss,outer_loss,task_index")
    );
}

#[test]
fn task_index_follows_period_multiples() {
    let mut cfg = small(desk("q_baseline.toml"), 5_000, 1_000);
    cfg.logging.per_inner = true;
    let (_, rows) = run_collect(&cfg).unwrap();
    assert_eq!(rows.len(), 5_000);
    for r in &rows {
        assert_eq!(r.task_index, r.env_step / 1_000, "step {}", r.env_step);
    }
}

#[test]
fn accounting_is_exact_for_every_method() {
    for name in DESK {
        let cfg = small(desk(name), 1_237, 500);
        let (summary, rows) = run_collect(&cfg).unwrap();
        assert_eq!(summary.env_steps, 1_237, "{name}");
        assert_eq!(rows.last().unwrap().env_step, 1_237, "{name}");
    }
}

#[test]
fn log_stride_and_per_inner_rows() {
    let cfg = small(desk("ac_bmg.toml"), 2_000, 1_000);
    let (s1, every) = run_collect(&cfg).unwrap();
    let mut strided = cfg.clone();
    strided.logging.stride = 4;
    let (s4, some) = run_collect(&strided).unwrap();
    assert_eq!(s1.total_return, s4.total_return);
    let kept: Vec<_> = every.iter().filter(|r| r.outer_iteration % 4 == 0 || r.env_step == 2_000).cloned().collect();
    assert_eq!(kept, some);

    let mut inner = cfg.clone();
    inner.logging.per_inner = true;
    let (si, rows) = run_collect(&inner).unwrap();
    assert_eq!(si.total_return, s1.total_return);
    // K + L − 1 updates per outer iteration
    let m = cfg.meta.as_ref().unwrap();
    assert_eq!(rows.iter().filter(|r| r.outer_iteration == 1).count(), m.k + m.l - 1);
    assert!(rows.windows(2).all(|w| w[0].env_step < w[1].env_step));
    assert_eq!(rows.last().unwrap().cumulative_return, si.total_return);
}

#[test]
fn sub_seeds_are_distinct() {
    let s: Vec<u64> = [Stream::Env, Stream::Init, Stream::Explore, Stream::Meta].iter().map(|&t| sub_seed(7, t)).collect();
    for i in 0..s.len() {
        for j in 0..i {
            assert_ne!(s[i], s[j]);
        }
    }
    assert_ne!(sub_seed(7, Stream::Env), sub_seed(8, Stream::Env));
}

fn variant(name: &str, base: ExperimentConfig, grid: &[(&str, Vec<toml::Value>)]) -> Variant {
    Variant { name: name.into(), base, grid: grid.iter().map(|(k, v)| (k.to_string(), v.clone())).collect() }
}

#[test]
fn one_cell_sweep_picks_that_cell() {
    let cfg = small(desk("ac_baseline.toml"), 500, 100);
    let spec = SweepSpec { seeds: 2, variants: vec![variant("b", cfg.clone(), &[])] };
    let reports = sweep(&spec, &Execution::default()).unwrap();
    assert_eq!(reports[0].best, Some(0));
    let best = reports[0].best_cell().unwrap();
    assert_eq!(best.config, cfg);
    assert_eq!(best.results.len(), 2);
}

#[test]
fn grid_expansion_and_unknown_grid_keys() {
    let cfg = small(desk("ac_baseline.toml"), 500, 100);
    let v = variant(
        "b",
        cfg.clone(),
        &[
            ("agent.alpha_ent", vec![0.0.into(), 0.4.into()]),
            ("agent.rollout", vec![8.into(), 16.into(), 32.into()]),
        ],
    );
    let cells = expand(&v).unwrap();
    assert_eq!(cells.len(), 6);
    assert_eq!(cells[1].label, "agent.alpha_ent=0.0;agent.rollout=16");
    assert_eq!(cells[5].config.agent.alpha_ent, 0.4);
    assert_eq!(cells[5].config.agent.rollout, 32);

    let bad = variant("b", cfg.clone(), &[("agent.alpha_entt", vec![0.1.into()])]);
    assert!(matches!(expand(&bad), Err(LabError::Config(_))));
    let off = variant("b", cfg, &[("agent.alpha_ent", vec![0.3.into()])]);
    assert!(expand(&off).is_err());
}

fn fake_cell(index: usize, label: &str, meta_lr: Option<f64>, totals: &[Result<f64, String>]) -> CellSummary {
    let mut config = desk(if meta_lr.is_some() { "ac_bmg.toml" } else { "ac_baseline.toml" });
    if let (Some(m), Some(lr)) = (config.meta.as_mut(), meta_lr) {
        m.meta_lr = lr;
    }
    let results: Vec<SeedResult> =
        totals.iter().enumerate().map(|(i, t)| SeedResult { seed: i as u64, outcome: t.clone() }).collect();
    let ok: Vec<f64> = totals.iter().filter_map(|t| t.as_ref().ok().copied()).collect();
    let (mean, std) = mean_std(&ok);
    CellSummary { variant: "v".into(), index, label: label.into(), config, results, mean, std }
}

#[test]
fn ties_prefer_lower_meta_lr_then_label() {
    let cells = vec![
        fake_cell(0, "a", Some(1e-3), &[Ok(1.0), Ok(3.0)]),
        fake_cell(1, "b", Some(1e-4), &[Ok(2.0), Ok(2.0)]),
        fake_cell(2, "c", Some(1e-4), &[Ok(2.0), Ok(2.0)]),
    ];
    assert_eq!(select_best(&cells), Some(1));
    let cells = vec![fake_cell(0, "z", None, &[Ok(1.0)]), fake_cell(1, "y", None, &[Ok(1.0)])];
    assert_eq!(select_best(&cells), Some(1));
}

#[test]
fn failed_cells_are_excluded() {
    let cells = vec![
        fake_cell(0, "a", Some(1e-3), &[Ok(100.0), Err("numeric fault".into())]),
        fake_cell(1, "b", Some(1e-3), &[Ok(1.0), Ok(2.0)]),
    ];
    assert!(cells[0].failed());
    assert_eq!(select_best(&cells), Some(1));
    let reports = vec![VariantReport { name: "v".into(), is_meta: true, cells, best: Some(1) }];
    let mut out = Vec::new();
    write_sweep_summary(&reports, &mut out).unwrap();
    let (header, rows) = csv_rows(&out);
    let status = header.iter().position(|h| h == "status").unwrap();
    let error = header.iter().position(|h| h == "error").unwrap();
    assert_eq!(rows[0][status], "failed");
    assert_eq!(rows[0][error], "numeric fault");
    assert_eq!(rows[1][status], "ok");
}

#[test]
fn sweep_results_do_not_depend_on_worker_count() {
    let cfg = small(desk("ac_bmg.toml"), 400, 200);
    let spec = SweepSpec {
        seeds: 3,
        variants: vec![variant("m", cfg, &[("meta.meta_lr", vec![1e-3.into(), 1e-4.into()])])],
    };
    let one = sweep(&spec, &Execution { workers: 1, ..Default::default() }).unwrap();
    let three = sweep(&spec, &Execution { workers: 3, ..Default::default() }).unwrap();
    assert_eq!(one, three);
}

#[test]
fn sweep_writes_per_run_files_and_best_config() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = small(desk("ac_baseline.toml"), 300, 100);
    let spec = SweepSpec {
        seeds: 1,
        variants: vec![variant("base", cfg, &[("agent.alpha_ent", vec![0.0.into(), 0.8.into()])])],
    };
    let exec = Execution { workers: 2, out: Some(dir.path().join("runs")), log_stride: None };
    let reports = sweep(&spec, &exec).unwrap();
    assert!(dir.path().join("runs/base/cell000/seed0.csv").exists());
    assert!(dir.path().join("runs/base/cell001/seed0.csv").exists());
    write_best_configs(&reports, dir.path()).unwrap();
    let best = ExperimentConfig::load(&dir.path().join("best_base.toml")).unwrap();
    assert_eq!(&best, &reports[0].best_cell().unwrap().config);
}

#[test]
fn fairness_audit() {
    let ok = [("b".to_string(), false, 5), ("mg".to_string(), true, 12), ("bmg".to_string(), true, 12)];
    audit_fairness(&ok).unwrap();
    let bad = [("mg".to_string(), true, 12), ("bmg".to_string(), true, 8)];
    assert!(matches!(audit_fairness(&bad), Err(LabError::Fairness(_))));

    let b = small(desk("ac_bmg.toml"), 200, 100);
    let spec = SweepSpec {
        seeds: 1,
        variants: vec![
            variant("x", b.clone(), &[("meta.meta_lr", vec![1e-3.into(), 1e-4.into()])]),
            variant("y", b, &[("meta.meta_lr", vec![1e-3.into()])]),
        ],
    };
    assert!(matches!(sweep(&spec, &Execution::default()), Err(LabError::Fairness(_))));
}

#[test]
fn relative_improvement_examples() {
    assert!((relative_improvement(&[1.5], &[1.0]).unwrap().percent - 50.0).abs() < 1e-12);
    assert_eq!(relative_improvement(&[2.0, 3.0], &[2.0, 3.0]).unwrap().percent, 0.0);
    let p = relative_improvement(&[1.79], &[1.24]).unwrap().percent;
    assert!((p - 44.354_838_709_677_42).abs() < 1e-9, "{p}");
    let i = relative_improvement(&[1.0, 3.0], &[-2.0]).unwrap();
    assert_eq!(i.per_seed, vec![150.0, 250.0]);
    assert!(matches!(relative_improvement(&[1.0], &[1e-10, -1e-10]), Err(LabError::UndefinedImprovement(_))));
    assert!(relative_improvement(&[], &[1.0]).is_err());
}

#[test]
fn frequency_sweep_rows() {
    let base = small(desk("ac_baseline.toml"), 600, 100);
    let method = small(desk("ac_bmg.toml"), 600, 100);
    let spec = FreqSpec {
        periods: vec![200, 600],
        seeds: 2,
        baseline: base.clone(),
        methods: vec![NamedConfig { name: "bmg".into(), config: method }],
    };
    let rows = nonstationarity_sweep(&spec, &Execution::default()).unwrap();
    assert_eq!(rows.len(), 4);
    assert_eq!((rows[0].period, rows[0].method.as_str()), (200, BASELINE_NAME));
    assert_eq!((rows[3].period, rows[3].method.as_str()), (600, "bmg"));
    assert!(rows[0].improvement.is_none());
    // period = lifetime: one task, same as running the baseline directly
    let mut single = base;
    single.env.period = 600;
    let t = run_collect(&single).unwrap().0.total_return;
    assert_eq!(rows[2].totals[0], (0, t));

    let mut out_s = Vec::new();
    let mut out_p = Vec::new();
    write_freq(&rows, &mut out_s, &mut out_p).unwrap();
    assert_eq!(csv_rows(&out_s).1.len(), 4);
    assert_eq!(csv_rows(&out_p).1.len(), 8);

    let mut bad = spec.clone();
    bad.periods = vec![0];
    assert!(nonstationarity_sweep(&bad, &Execution::default()).is_err());
}

#[test]
fn ablation_configurations() {
    let base = desk("ac_bmg_reward.toml");
    let prefix = ablation_configs(&base, AblationMode::Prefix, 4).unwrap();
    let labels: Vec<&str> = prefix.iter().map(|(l, _)| l.as_str()).collect();
    assert_eq!(
        labels,
        ["none", "+value", "+reward", "+td_error", "+action_probs", "+grad_cosine", "+prev_meta", "+states"]
    );
    assert!(prefix[0].1.context.is_none());
    assert_eq!(prefix[3].1.context.as_ref().unwrap().families, vec![Family::Value, Family::Reward, Family::TdError]);
    assert!(prefix.iter().skip(1).all(|(_, c)| c.context.as_ref().unwrap().history == 4));

    let individual = ablation_configs(&base, AblationMode::Individual, 4).unwrap();
    assert_eq!(individual.len(), 8);
    assert!(individual.iter().skip(1).all(|(_, c)| c.context.as_ref().unwrap().families.len() == 1));

    let full = ablation_configs(&base, AblationMode::Prefix, 10).unwrap();
    let (_, all) = full.last().unwrap();
    let info = metalab::context::LayoutInfo {
        kind: metalab::context::LearnerKind::ActorCritic,
        num_cells: 25,
        num_meta: 1,
    };
    assert_eq!(all.context.as_ref().unwrap().feature_spec().input_dim(info), 660);
}

#[test]
fn ablation_none_equals_plain_bmg() {
    let base = small(desk("ac_bmg_reward.toml"), 480, 160);
    let rows = richness_ablation(&base, AblationMode::Prefix, 4, 1, &Execution::default()).unwrap();
    assert_eq!(rows.len(), 8);
    let plain = small(desk("ac_bmg.toml"), 480, 160);
    assert_eq!(rows[0].totals[0].1, run_collect(&plain).unwrap().0.total_return);
    assert_eq!(rows[0].input_dim, 0);
    // value + reward, means and std, H = 4
    assert_eq!(rows[2].input_dim, 16);
}

fn write_tmp(dir: &std::path::Path, name: &str, bytes: &[u8]) -> PathBuf {
    let p = dir.join(name);
    std::fs::write(&p, bytes).unwrap();
    p
}

#[test]
fn plotdata_schedule_and_probes() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = small(desk("ac_bmg_reward.toml"), 800, 400);
    let mut files = Vec::new();
    let mut runs = Vec::new();
    for seed in 0..3 {
        let mut c = cfg.clone();
        c.seed = seed;
        let (_, bytes) = run_to_bytes(&c).unwrap();
        runs.push(run_collect(&c).unwrap().1);
        files.push(write_tmp(dir.path(), &format!("s{seed}.csv"), &bytes));
    }
    let mut out = Vec::new();
    emit_plotdata(&files, PlotKind::Schedule, &mut out).unwrap();
    let (header, rows) = csv_rows(&out);
    assert_eq!(
        header,
        [
            "env_step",
            "n",
            "mean_rollout_reward_mean",
            "mean_rollout_reward_ci_low",
            "mean_rollout_reward_ci_high",
            "alpha_ent_mean",
            "alpha_ent_ci_low",
            "alpha_ent_ci_high"
        ]
    );
    assert_eq!(rows.len(), runs[0].len());
    let xs: Vec<f64> = runs.iter().map(|r| r[2].meta_values[0]).collect();
    let (m, lo, _) = ci95(&xs);
    let (_, s) = mean_std(&xs);
    assert_eq!(rows[2][5].parse::<f64>().unwrap(), m);
    assert!((lo - (m - 1.96 * s / 3f64.sqrt())).abs() < 1e-15);
    assert_eq!(rows[2][6].parse::<f64>().unwrap(), lo);

    let mut out = Vec::new();
    emit_plotdata(&files, PlotKind::Probes, &mut out).unwrap();
    let (header, rows) = csv_rows(&out);
    assert_eq!(header.len(), 2 + 10);
    assert_eq!(rows.len(), runs[0].len());

    let plain = small(desk("ac_bmg.toml"), 400, 200);
    let f = write_tmp(dir.path(), "plain.csv", &run_to_bytes(&plain).unwrap().1);
    assert!(matches!(emit_plotdata(&[f], PlotKind::Probes, Vec::new()), Err(LabError::ProbesAbsent)));
    assert!(emit_plotdata(&[], PlotKind::Schedule, Vec::new()).is_err());
}

#[test]
fn plotdata_freq() {
    let dir = tempfile::tempdir().unwrap();
    let a = write_tmp(
        dir.path(),
        "a.csv",
        b"period,method,seed,total,relative_improvement\n100,bmg,0,1,\n100,bmg,1,3,\n100,bmg,2,2,\n200,bmg,0,5,\n200,bmg,1,5,\n200,bmg,2,9,\n",
    );
    let mut out = Vec::new();
    emit_plotdata(&[a.clone()], PlotKind::Freq, &mut out).unwrap();
    assert_eq!(
        String::from_utf8(out).unwrap(),
        "period,method,n,median,q1,q3\n100,bmg,3,2,1.5,2.5\n200,bmg,3,5,5,7\n"
    );
    let b = write_tmp(dir.path(), "b.csv", b"period,method,seed,total\n300,bmg,0,1\n300,bmg,1,1\n");
    assert!(matches!(emit_plotdata(&[a, b], PlotKind::Freq, Vec::new()), Err(LabError::SeedMismatch(_))));
}

#[test]
fn shipped_sweep_files_expand_to_valid_configs() {
    let dir = PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../../configs/sweeps");
    for name in ["ac_desk.toml", "q_desk.toml"] {
        let spec = SweepSpec::load(&dir.join(name)).unwrap();
        for v in &spec.variants {
            let cells = expand(v).unwrap();
            for c in &cells {
                c.config.validate().unwrap_or_else(|e| panic!("{name} {}: {e}", c.label));
            }
            assert!(cells.len() > 1, "{name}/{}", v.name);
        }
    }
    let freq = FreqSpec::load(&dir.join("freq_q.toml")).unwrap();
    freq.baseline.validate().unwrap();
    for m in &freq.methods {
        m.config.validate().unwrap();
    }
}
