use std::collections::BTreeSet;
use std::path::{Path, PathBuf};

use clap::{Parser, Subcommand, ValueEnum};
use serde::Serialize;

use rap::adversary::{evaluate_attack, train_adversary};
use rap::advtrain::{fit, TrainConfig, TrainLog};
use rap::baselines::{perturb_for_method, Method};
use rap::dataio::{
    load_ratings, load_user_attributes, split_attacker, split_recommendation, AttackSplit,
    AttackSplitManifest, Attribute, AttributeTable, RatingDataset,
};
use rap::error::{RapError, Result};
use rap::harness::{run_alpha_sweep, run_table1, run_variants, ExperimentConfig, ExperimentReport};
use rap::nnkernel::ParameterSet;
use rap::recommender::{batch_top_k, score_item, top_k};

#[derive(Parser)]
#[command(
    name = "rap",
    version,
    about = "Privacy-aware ranking recommender and its evaluation harness"
)]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum Protocol {
    /// Train on the complete dataset (serving checkpoints).
    Full,
    /// Hold out l rated items per user first (ranking evaluation).
    Rec,
    /// 80/20 user split with l items removed from test users.
    Attack,
}

#[derive(Subcommand)]
enum Cmd {
    /// Parse the raw data files, validate them, and write normalized
    /// copies plus split manifests.
    PrepareData {
        #[arg(long)]
        ratings: PathBuf,
        #[arg(long)]
        users: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 35)]
        l: usize,
        #[arg(long, default_value_t = 42)]
        seed: u64,
    },
    /// Train one defense and write checkpoints, the split manifest, and
    /// a JSON training log.
    Train {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        method: String,
        #[arg(long)]
        alpha: Option<f64>,
        #[arg(long)]
        l: Option<usize>,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long, value_enum, default_value_t = Protocol::Attack)]
        protocol: Protocol,
        /// Attribute targeted by the obfuscation baseline.
        #[arg(long, default_value = "gender")]
        blurme_attr: String,
    },
    /// Top-k recommendations for one user from a checkpoint, as CSV.
    Recommend {
        #[arg(long)]
        checkpoint: PathBuf,
        /// Original 1-based user id when --ratings is given, else a
        /// dense 0-based index.
        #[arg(long)]
        user: u32,
        #[arg(long)]
        k: usize,
        #[arg(long)]
        ratings: Option<PathBuf>,
    },
    /// Evaluate the external adversary against a trained checkpoint on
    /// an attack-split manifest.
    AttackEval {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        split: PathBuf,
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        ratings: Option<PathBuf>,
        #[arg(long)]
        users: Option<PathBuf>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Full method-by-depth grid; writes report JSON and CSV.
    Table1 {
        #[arg(long)]
        config: PathBuf,
    },
    /// Adversarial-weight sweep at fixed depth.
    AlphaSweep {
        #[arg(long)]
        config: PathBuf,
        #[arg(long, default_value_t = 35)]
        l: usize,
    },
    /// Full model against the single-attribute variants.
    Variants {
        #[arg(long)]
        config: PathBuf,
    },
}

fn main() {
    env_logger::init();
    let cli = Cli::parse();
    if let Err(e) = run(cli) {
        eprintln!("error: {e}");
        std::process::exit(e.exit_code());
    }
}

fn run(cli: Cli) -> Result<()> {
    match cli.cmd {
        Cmd::PrepareData {
            ratings,
            users,
            out,
            l,
            seed,
        } => prepare_data(&ratings, &users, &out, l, seed),
        Cmd::Train {
            config,
            method,
            alpha,
            l,
            seed,
            out,
            protocol,
            blurme_attr,
        } => train_cmd(&config, &method, alpha, l, seed, out, protocol, &blurme_attr),
        Cmd::Recommend {
            checkpoint,
            user,
            k,
            ratings,
        } => recommend_cmd(&checkpoint, user, k, ratings.as_deref()),
        Cmd::AttackEval {
            checkpoint,
            split,
            config,
            ratings,
            users,
            out,
        } => attack_eval_cmd(
            &checkpoint,
            &split,
            config.as_deref(),
            ratings.as_deref(),
            users.as_deref(),
            out.as_deref(),
        ),
        Cmd::Table1 { config } => {
            let x = ExperimentConfig::from_file(&config)?;
            let (ds, attrs) = rap::harness::load_data(&x)?;
            let report = run_table1(&x, &ds, &attrs)?;
            finish_report(&x, &report, "table1")
        }
        Cmd::AlphaSweep { config, l } => {
            let x = ExperimentConfig::from_file(&config)?;
            let (ds, attrs) = rap::harness::load_data(&x)?;
            let report = run_alpha_sweep(&x, &ds, &attrs, l)?;
            finish_report(&x, &report, "alpha_sweep")
        }
        Cmd::Variants { config } => {
            let x = ExperimentConfig::from_file(&config)?;
            let (ds, attrs) = rap::harness::load_data(&x)?;
            let report = run_variants(&x, &ds, &attrs)?;
            finish_report(&x, &report, "variants")
        }
    }
}

fn finish_report(x: &ExperimentConfig, report: &ExperimentReport, stem: &str) -> Result<()> {
    report.write(&x.out_dir, stem)?;
    print!("{}", report.to_csv());
    println!(
        "wrote {} and {} in {:.1}s",
        x.out_dir.join(format!("{stem}.json")).display(),
        x.out_dir.join(format!("{stem}.csv")).display(),
        report.wall_secs
    );
    Ok(())
}

#[derive(Serialize)]
struct DatasetStats {
    num_users: usize,
    num_items: usize,
    num_ratings: usize,
    min_profile: usize,
    max_profile: usize,
    mean_profile: f64,
}

fn prepare_data(ratings: &Path, users: &Path, out: &Path, l: usize, seed: u64) -> Result<()> {
    let ds = load_ratings(ratings)?;
    let attrs = load_user_attributes(users, &ds.user_ids)?;
    std::fs::create_dir_all(out)?;
    let stats = DatasetStats {
        num_users: ds.num_users(),
        num_items: ds.num_items(),
        num_ratings: ds.num_ratings(),
        min_profile: (0..ds.num_users()).map(|u| ds.profile_len(u)).min().unwrap_or(0),
        max_profile: (0..ds.num_users()).map(|u| ds.profile_len(u)).max().unwrap_or(0),
        mean_profile: ds.mean_profile_len(),
    };
    std::fs::write(
        out.join("dataset_stats.json"),
        serde_json::to_string_pretty(&stats)?,
    )?;
    std::fs::write(out.join("ratings.tsv"), ds.to_tsv())?;
    std::fs::write(out.join("users.psv"), attrs.to_psv(&ds.user_ids))?;
    let rec = split_recommendation(&ds, l, seed)?;
    std::fs::write(
        out.join("rec_split.json"),
        serde_json::to_string_pretty(&rec.manifest(&ds))?,
    )?;
    let att = split_attacker(&ds, 0.8, l, seed)?;
    std::fs::write(
        out.join("attack_split.json"),
        serde_json::to_string_pretty(&att.manifest(&ds))?,
    )?;
    println!(
        "prepared {} ratings, {} users, {} items into {}",
        stats.num_ratings,
        stats.num_users,
        stats.num_items,
        out.display()
    );
    Ok(())
}

#[allow(clippy::too_many_arguments)]
fn train_cmd(
    config: &Path,
    method: &str,
    alpha: Option<f64>,
    l: Option<usize>,
    seed: Option<u64>,
    out: Option<PathBuf>,
    protocol: Protocol,
    blurme_attr: &str,
) -> Result<()> {
    let x = ExperimentConfig::from_file(config)?;
    let method = Method::from_key(method)?;
    let blurme_attr = Attribute::from_key(blurme_attr)?;
    let l = l.unwrap_or_else(|| x.l_values.first().copied().unwrap_or(35));
    let seed = seed.unwrap_or_else(|| x.seeds.first().copied().unwrap_or(1));
    let mut tcfg: TrainConfig = x.train.clone();
    tcfg.seed = seed;
    tcfg.k_train = l;
    if method != Method::Rap {
        tcfg.alpha = 0.0;
    }
    if let Some(a) = alpha {
        tcfg.alpha = a;
    }
    let out_dir = out.unwrap_or_else(|| {
        x.out_dir
            .join(format!("train-{}-l{}-seed{}", method.key(), l, seed))
    });
    std::fs::create_dir_all(&out_dir)?;

    let (ds, attrs) = rap::harness::load_data(&x)?;
    let (state, log): (rap::advtrain::TrainState, TrainLog) = match protocol {
        Protocol::Full => {
            let shared = perturb_for_method(method, &ds, &attrs, &x.baseline, blurme_attr, seed)?;
            let users: Vec<usize> = (0..ds.num_users()).collect();
            fit(&tcfg, &shared, &attrs, &users)?
        }
        Protocol::Rec => {
            let split = split_recommendation(&ds, l, seed)?;
            std::fs::write(
                out_dir.join("rec_split.json"),
                serde_json::to_string_pretty(&split.manifest(&ds))?,
            )?;
            let shared =
                perturb_for_method(method, &split.train, &attrs, &x.baseline, blurme_attr, seed)?;
            let users: Vec<usize> = (0..ds.num_users()).collect();
            fit(&tcfg, &shared, &attrs, &users)?
        }
        Protocol::Attack => {
            let split = split_attacker(&ds, x.attack_frac, l, seed)?;
            std::fs::write(
                out_dir.join("attack_split.json"),
                serde_json::to_string_pretty(&split.manifest(&ds))?,
            )?;
            let guarded = attrs.with_guard(&split.test_users);
            let reduced = split.apply(&ds)?;
            let shared =
                perturb_for_method(method, &reduced, &attrs, &x.baseline, blurme_attr, seed)?;
            if method == Method::Blurme || method == Method::Ldp {
                // Perturbed data is auditable in the input format.
                std::fs::write(out_dir.join("shared_ratings.tsv"), shared.to_tsv())?;
            }
            fit(&tcfg, &shared, &guarded, &split.train_users)?
        }
    };
    state.rec_params.save(&out_dir.join("rec.ckpt"))?;
    if !state.att_params.is_empty() {
        state.att_params.save(&out_dir.join("att.ckpt"))?;
    }
    std::fs::write(
        out_dir.join("train_log.json"),
        serde_json::to_string_pretty(&log)?,
    )?;
    println!(
        "trained {} (l={l}, seed={seed}) in {:.1}s; wrote {}",
        method.key(),
        log.total_secs,
        out_dir.display()
    );
    Ok(())
}

fn recommend_cmd(checkpoint: &Path, user: u32, k: usize, ratings: Option<&Path>) -> Result<()> {
    let ps = ParameterSet::load(checkpoint)?;
    println!("user,rank,item,score");
    match ratings {
        Some(path) => {
            let ds = load_ratings(path)?;
            let dense = ds
                .user_ids
                .dense(user)
                .ok_or_else(|| RapError::argument(format!("unknown user id {user}")))?;
            let rated = ds.item_set_of(dense);
            let recs = top_k(&ps, dense, &rated, k)?;
            for (rank, &item) in recs.iter().enumerate() {
                let score = score_item(&ps, dense, item)?;
                println!("{},{},{},{:.6}", user, rank + 1, ds.item_ids.orig(item), score);
            }
        }
        None => {
            let recs = top_k(&ps, user as usize, &[], k)?;
            for (rank, &item) in recs.iter().enumerate() {
                let score = score_item(&ps, user as usize, item)?;
                println!("{},{},{},{:.6}", user, rank + 1, item, score);
            }
        }
    }
    Ok(())
}

#[derive(Serialize)]
struct AttackReportRow {
    attribute: String,
    auc: f64,
    score_matrix: [usize; 2],
}

#[derive(Serialize)]
struct AttackReport {
    seed: u64,
    l: usize,
    rows: Vec<AttackReportRow>,
}

fn attack_eval_cmd(
    checkpoint: &Path,
    split_path: &Path,
    config: Option<&Path>,
    ratings: Option<&Path>,
    users: Option<&Path>,
    out: Option<&Path>,
) -> Result<()> {
    let x = match config {
        Some(p) => ExperimentConfig::from_file(p)?,
        None => ExperimentConfig::default(),
    };
    let ratings_path = ratings.unwrap_or(&x.ratings_path);
    let users_path = users.unwrap_or(&x.users_path);
    let ds = load_ratings(ratings_path)?;
    let attrs = load_user_attributes(users_path, &ds.user_ids)?;
    let manifest: AttackSplitManifest =
        serde_json::from_str(&std::fs::read_to_string(split_path)?)?;
    let split = AttackSplit::from_manifest(&manifest, &ds)?;
    let ps = ParameterSet::load(checkpoint)?;
    let reduced = split.apply(&ds)?;
    let guarded = attrs.with_guard(&split.test_users);
    let report = attack_eval(&x, &ds, &reduced, &attrs, &guarded, &split, &ps)?;
    let json = serde_json::to_string_pretty(&report)?;
    if let Some(dir) = out {
        std::fs::create_dir_all(dir)?;
        std::fs::write(dir.join("attack_report.json"), &json)?;
    }
    println!("{json}");
    Ok(())
}

fn attack_eval(
    x: &ExperimentConfig,
    original: &RatingDataset,
    shared: &RatingDataset,
    attrs: &AttributeTable,
    guarded: &AttributeTable,
    split: &AttackSplit,
    rec_params: &ParameterSet,
) -> Result<AttackReport> {
    let adv_train_lists: Vec<Vec<usize>> = split
        .train_users
        .iter()
        .map(|&u| original.item_set_of(u))
        .collect();
    let recs = batch_top_k(
        rec_params,
        &split.test_users,
        |u| shared.item_set_of(u),
        |u| split.l.min(shared.num_items() - shared.profile_len(u)),
    )?;
    let test_lists: Vec<Vec<usize>> = split
        .test_users
        .iter()
        .zip(&recs)
        .map(|(&u, rec)| {
            let mut s: BTreeSet<usize> = shared.item_set_of(u).into_iter().collect();
            s.extend(rec.iter().copied());
            s.into_iter().collect()
        })
        .collect();
    let mut rows = Vec::new();
    for (ti, &attr) in Attribute::ALL.iter().enumerate() {
        let train_labels: Vec<usize> = split
            .train_users
            .iter()
            .map(|&u| guarded.label(u, attr))
            .collect::<Result<_>>()?;
        let test_labels: Vec<usize> = split
            .test_users
            .iter()
            .map(|&u| attrs.label_unguarded(u, attr))
            .collect();
        let mut adv_cfg = x.adversary.clone();
        adv_cfg.seed = split.seed ^ (0x5ad5 + ti as u64);
        let adv = train_adversary(
            &adv_train_lists,
            &train_labels,
            attr.class_count(),
            original.num_items(),
            &adv_cfg,
        )?;
        let auc = evaluate_attack(&adv, &test_lists, &test_labels)?;
        rows.push(AttackReportRow {
            attribute: attr.key().to_string(),
            auc,
            score_matrix: [test_lists.len(), attr.class_count()],
        });
    }
    Ok(AttackReport {
        seed: split.seed,
        l: split.l,
        rows,
    })
}
