use std::fmt::Write as _;
use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Instant;

use anyhow::{anyhow, Context};
use clap::{Parser, Subcommand};

use flowcond::config::RunConfig;
use flowcond::detector::{DetectionModel, Detector, StreamMode, TubeletDetection};
use flowcond::experiment::{
    ablate, coco_average, report_thresholds, train_stream, AblationAxis, PreparedVideo,
    ABLATION_CSV_HEADER,
};
use flowcond::flowfield::{flows_for_video, read_flow, write_flow, FlowQuality};
use flowcond::numerics::{load_checkpoint, save_checkpoint};
use flowcond::records::{format_detection, format_tube, parse_detection, parse_tube};
use flowcond::synthdata::{
    generate, read_dataset, write_dataset, Split, VideoSample, MANIFEST_FILE,
};
use flowcond::tubes::{link_detections, link_tubelets, video_map, ActionTube, GroundTruthTube};

#[derive(Parser)]
#[command(
    name = "flowcond",
    version,
    about = "Flow-conditioned action detection on synthetic videos"
)]
struct Cli {
    /// Config file of `section.key = value` lines; defaults apply to missing keys.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Override `run.seed`.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Directory receiving all artifacts.
    #[arg(long, global = true, default_value = "out")]
    out: PathBuf,
    /// Overwrite existing artifacts and ignore config hash mismatches.
    #[arg(long, global = true)]
    force: bool,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate the synthetic dataset.
    GenData,
    /// Recompute flow for every dataset video with the chosen estimator.
    ComputeFlow {
        /// fast|iterative; defaults to `gen.flow_quality`.
        #[arg(long)]
        quality: Option<FlowQuality>,
    },
    /// Train every stream of `run.mode` on the training split.
    Train,
    /// Run the trained model over the test split.
    Detect,
    /// Link detections into action tubes.
    Link,
    /// Score tubes against the test annotations.
    Eval,
    /// Sweep one axis and write a CSV table.
    Ablate {
        /// site|kernel|flow_quality|mode
        #[arg(long)]
        axis: AblationAxis,
    },
    /// Print the effective configuration.
    ShowConfig,
}

/// Failure with its exit code: 2 for bad or missing inputs, 3 for runtime errors.
struct Failure {
    code: u8,
    error: anyhow::Error,
}

type CmdResult<T = ()> = Result<T, Failure>;

trait Classify<T> {
    fn input(self) -> CmdResult<T>;
    fn runtime(self) -> CmdResult<T>;
}

impl<T, E: Into<anyhow::Error>> Classify<T> for Result<T, E> {
    fn input(self) -> CmdResult<T> {
        self.map_err(|e| Failure {
            code: 2,
            error: e.into(),
        })
    }

    fn runtime(self) -> CmdResult<T> {
        self.map_err(|e| Failure {
            code: 3,
            error: e.into(),
        })
    }
}

const DETECTIONS_FILE: &str = "detections.txt";
const TUBELETS_FILE: &str = "tubelets.txt";
const TUBES_FILE: &str = "tubes.txt";
const METRICS_CSV: &str = "metrics.csv";
const METRICS_TXT: &str = "metrics.txt";

struct Ctx {
    cfg: RunConfig,
    out: PathBuf,
    force: bool,
    log: String,
}

impl Ctx {
    fn data_dir(&self) -> PathBuf {
        if self.cfg.data_dir.is_absolute() {
            self.cfg.data_dir.clone()
        } else {
            self.out.join(&self.cfg.data_dir)
        }
    }

    fn flow_dir(&self, quality: FlowQuality) -> PathBuf {
        self.out.join("flows").join(quality.to_string())
    }

    fn checkpoint(&self, stream: StreamMode) -> PathBuf {
        self.out.join("checkpoints").join(format!("{stream}.ckpt"))
    }

    fn note(&mut self, msg: impl AsRef<str>) {
        log::info!("{}", msg.as_ref());
        self.log.push_str(msg.as_ref());
        self.log.push('\n');
    }

    /// Refuse to replace `path` unless `--force` was given.
    fn check_fresh(&self, path: &Path) -> CmdResult {
        if path.exists() && !self.force {
            return Err(anyhow!(
                "{} already exists; pass --force to overwrite",
                path.display()
            ))
            .input();
        }
        Ok(())
    }

    fn header(&self) -> String {
        format!(
            "# config {} data {} model {}\n",
            self.cfg.hash(),
            self.cfg.data_hash(),
            self.cfg.model_hash()
        )
    }

    /// Compare a `key hash` pair recorded in an artifact header with the current
    /// config.
    fn check_hash(&self, path: &Path, text: &str, key: &str, expected: &str) -> CmdResult {
        let recorded = text
            .lines()
            .take_while(|l| l.starts_with('#'))
            .find_map(|l| {
                let f: Vec<&str> = l.trim_start_matches('#').split_whitespace().collect();
                f.iter()
                    .position(|w| *w == key)
                    .and_then(|i| f.get(i + 1).map(|s| s.to_string()))
            });
        match recorded {
            Some(h) if h != expected && !self.force => Err(anyhow!(
                "{} was produced with {key} hash {h}, current config has {expected}; pass --force to use it anyway",
                path.display()
            ))
            .input(),
            Some(_) => Ok(()),
            None => {
                log::warn!("{} records no {key} hash", path.display());
                Ok(())
            }
        }
    }

    fn write_artifact(&self, path: &Path, body: &str) -> CmdResult {
        self.check_fresh(path)?;
        if let Some(dir) = path.parent() {
            fs::create_dir_all(dir)
                .with_context(|| format!("creating {}", dir.display()))
                .runtime()?;
        }
        fs::write(path, format!("{}{body}", self.header()))
            .with_context(|| format!("writing {}", path.display()))
            .runtime()
    }

    fn read_artifact(&self, path: &Path, key: &str, expected: &str) -> CmdResult<String> {
        let text = fs::read_to_string(path)
            .with_context(|| {
                format!(
                    "reading {} (run the producing command first)",
                    path.display()
                )
            })
            .input()?;
        self.check_hash(path, &text, key, expected)?;
        Ok(text)
    }

    fn load_dataset(&self) -> CmdResult<Vec<VideoSample>> {
        let dir = self.data_dir();
        let manifest = dir.join(MANIFEST_FILE);
        if !manifest.exists() {
            return Err(anyhow!(
                "no dataset at {} (run gen-data first)",
                dir.display()
            ))
            .input();
        }
        let text = fs::read_to_string(&manifest).input()?;
        self.check_hash(&manifest, &text, "data", &self.cfg.data_hash())?;
        let (mut samples, _) = read_dataset(&dir).input()?;
        let flow_dir = self.flow_dir(self.cfg.gen.flow_quality);
        if flow_dir.exists() {
            for s in &mut samples {
                for (t, f) in s.flows.iter_mut().enumerate() {
                    *f = read_flow(&flow_dir.join(&s.video_id).join(format!("flow_{t:04}.flo")))
                        .input()?;
                }
            }
        }
        Ok(samples)
    }

    fn load_model(&self) -> CmdResult<DetectionModel> {
        let mut dets = Vec::new();
        for &stream in self.cfg.mode.streams() {
            let path = self.checkpoint(stream);
            let meta = path.with_extension("meta");
            self.read_artifact(&meta, "model", &self.cfg.model_hash())?;
            let mut det = Detector::new(stream, &self.cfg.detector, self.cfg.seed).input()?;
            load_checkpoint(det.params_mut(), &path).input()?;
            dets.push(det);
        }
        let mut it = dets.into_iter();
        let first = it.next().expect("every mode has a stream");
        match it.next() {
            None => Ok(DetectionModel::Single(first)),
            Some(second) => DetectionModel::two_stream(first, second).input(),
        }
    }
}

fn gen_data(ctx: &mut Ctx) -> CmdResult {
    let dir = ctx.data_dir();
    ctx.check_fresh(&dir.join(MANIFEST_FILE))?;
    let samples = generate(&ctx.cfg.gen).runtime()?;
    write_dataset(&samples, &ctx.cfg.class_names(), &dir).runtime()?;
    let manifest = dir.join(MANIFEST_FILE);
    let text = fs::read_to_string(&manifest).runtime()?;
    fs::write(&manifest, format!("{}{text}", ctx.header())).runtime()?;
    ctx.note(format!(
        "wrote {} videos to {}",
        samples.len(),
        dir.display()
    ));
    Ok(())
}

fn compute_flow(ctx: &mut Ctx, quality: Option<FlowQuality>) -> CmdResult {
    let quality = quality.unwrap_or(ctx.cfg.gen.flow_quality);
    let dir = ctx.flow_dir(quality);
    ctx.check_fresh(&dir)?;
    let (samples, _) = {
        let data = ctx.data_dir();
        if !data.join(MANIFEST_FILE).exists() {
            return Err(anyhow!(
                "no dataset at {} (run gen-data first)",
                data.display()
            ))
            .input();
        }
        read_dataset(&data).input()?
    };
    for s in &samples {
        let vdir = dir.join(&s.video_id);
        fs::create_dir_all(&vdir).runtime()?;
        for (t, f) in flows_for_video(&s.frames, quality)
            .runtime()?
            .iter()
            .enumerate()
        {
            write_flow(f, &vdir.join(format!("flow_{t:04}.flo"))).runtime()?;
        }
    }
    ctx.note(format!(
        "wrote {quality} flow for {} videos to {}",
        samples.len(),
        dir.display()
    ));
    Ok(())
}

fn train_cmd(ctx: &mut Ctx) -> CmdResult {
    let samples = ctx.load_dataset()?;
    let videos: Vec<PreparedVideo> = samples.iter().map(PreparedVideo::from_sample).collect();
    if !videos.iter().any(|v| v.split == Split::Train) {
        return Err(anyhow!("dataset has no training videos")).input();
    }
    let pipeline = ctx.cfg.pipeline();
    for &stream in ctx.cfg.mode.streams() {
        let path = ctx.checkpoint(stream);
        ctx.check_fresh(&path)?;
        let started = Instant::now();
        let (det, log) = train_stream(stream, &pipeline, &videos, ctx.cfg.seed).runtime()?;
        fs::create_dir_all(path.parent().unwrap()).runtime()?;
        save_checkpoint(det.params(), &path).runtime()?;
        let mut meta = format!("stream {stream}\nparameters {}\n", det.parameter_count());
        for e in &log.epochs {
            writeln!(
                meta,
                "epoch {} lr {:e} loss {:.6}",
                e.epoch, e.lr, e.mean_loss
            )
            .unwrap();
        }
        ctx.write_artifact(&path.with_extension("meta"), &meta)?;
        ctx.note(format!(
            "trained {stream} stream in {:.1}s; final loss {:.5}; checkpoint {}",
            started.elapsed().as_secs_f64(),
            log.epochs.last().map_or(f64::NAN, |e| e.mean_loss),
            path.display()
        ));
    }
    Ok(())
}

fn detect_cmd(ctx: &mut Ctx) -> CmdResult {
    let model = ctx.load_model()?;
    let samples = ctx.load_dataset()?;
    let k = model.tubelet_len();
    let mut body = String::new();
    let mut frames = 0;
    let started = Instant::now();
    for s in samples.iter().filter(|s| s.split == Split::Test) {
        let v = PreparedVideo::from_sample(s);
        frames += v.rgb.len();
        let per_start = model
            .detect_video(&v.rgb, &v.flow, &ctx.cfg.detect)
            .runtime()?;
        for t in per_start.iter().flatten() {
            let line = if k == 1 {
                format_detection(
                    &v.video_id,
                    &flowcond::detector::Detection {
                        bbox: t.boxes[0],
                        class_id: t.class_id,
                        score: t.score,
                        frame_index: t.start_frame,
                        anchor: t.anchor,
                    },
                )
            } else {
                let tube = ActionTube {
                    class_id: t.class_id,
                    score: t.score,
                    start_frame: t.start_frame,
                    boxes: t.boxes.clone(),
                };
                format_tube(&v.video_id, &tube)
            };
            body.push_str(&line.runtime()?);
            body.push('\n');
        }
    }
    let file = if k == 1 {
        DETECTIONS_FILE
    } else {
        TUBELETS_FILE
    };
    ctx.write_artifact(&ctx.out.join(file), &body)?;
    ctx.note(format!(
        "detected on {frames} frames ({:.2} ms/frame); wrote {file}",
        1e3 * started.elapsed().as_secs_f64() / frames.max(1) as f64
    ));
    Ok(())
}

fn data_lines(text: &str) -> impl Iterator<Item = (usize, &str)> {
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty() && !l.starts_with('#'))
}

fn link_cmd(ctx: &mut Ctx) -> CmdResult {
    let k = ctx.cfg.detector.tubelet_len;
    let file = ctx.out.join(if k == 1 {
        DETECTIONS_FILE
    } else {
        TUBELETS_FILE
    });
    let text = ctx.read_artifact(&file, "model", &ctx.cfg.model_hash())?;
    // video id -> per-start tubelets, in first-seen video order
    let mut videos: Vec<(String, Vec<Vec<TubeletDetection>>)> = Vec::new();
    for (i, line) in data_lines(&text) {
        let (vid, t) = if k == 1 {
            parse_detection(line).map(|(v, d)| {
                (
                    v,
                    TubeletDetection {
                        boxes: vec![d.bbox],
                        class_id: d.class_id,
                        score: d.score,
                        start_frame: d.frame_index,
                        anchor: 0,
                    },
                )
            })
        } else {
            parse_tube(line).map(|(v, t)| {
                (
                    v,
                    TubeletDetection {
                        boxes: t.boxes,
                        class_id: t.class_id,
                        score: t.score,
                        start_frame: t.start_frame,
                        anchor: 0,
                    },
                )
            })
        }
        .with_context(|| format!("{}:{}", file.display(), i + 1))
        .input()?;
        let entry = match videos.iter().position(|(v, _)| *v == vid) {
            Some(p) => &mut videos[p].1,
            None => {
                videos.push((vid, Vec::new()));
                &mut videos.last_mut().unwrap().1
            }
        };
        if entry.len() <= t.start_frame {
            entry.resize(t.start_frame + 1, Vec::new());
        }
        entry[t.start_frame].push(t);
    }
    let mut body = String::new();
    let mut count = 0;
    for (vid, per_start) in &videos {
        for class_id in 1..=ctx.cfg.detector.num_classes {
            let tubes = if k == 1 {
                let per_frame: Vec<Vec<flowcond::detector::Detection>> = per_start
                    .iter()
                    .enumerate()
                    .map(|(f, ts)| {
                        ts.iter()
                            .map(|t| flowcond::detector::Detection {
                                bbox: t.boxes[0],
                                class_id: t.class_id,
                                score: t.score,
                                frame_index: f,
                                anchor: t.anchor,
                            })
                            .collect()
                    })
                    .collect();
                link_detections(&per_frame, class_id, &ctx.cfg.link).0
            } else {
                link_tubelets(per_start, class_id, &ctx.cfg.link)
            };
            for t in tubes {
                body.push_str(&format_tube(vid, &t).runtime()?);
                body.push('\n');
                count += 1;
            }
        }
    }
    ctx.write_artifact(&ctx.out.join(TUBES_FILE), &body)?;
    ctx.note(format!("linked {count} tubes over {} videos", videos.len()));
    Ok(())
}

fn eval_cmd(ctx: &mut Ctx) -> CmdResult {
    let path = ctx.out.join(TUBES_FILE);
    let text = ctx.read_artifact(&path, "model", &ctx.cfg.model_hash())?;
    let mut tubes = Vec::new();
    for (i, line) in data_lines(&text) {
        tubes.push(
            parse_tube(line)
                .with_context(|| format!("{}:{}", path.display(), i + 1))
                .input()?,
        );
    }
    let samples = ctx.load_dataset()?;
    let gts: Vec<(String, GroundTruthTube)> = samples
        .iter()
        .filter(|s| s.split == Split::Test)
        .flat_map(|s| s.gt_tubes.iter().map(|g| (s.video_id.clone(), g.clone())))
        .collect();
    let report = video_map(&tubes, &gts, &report_thresholds()).runtime()?;
    let mut csv = String::from("threshold,class_id,ap\n");
    let mut summary = String::new();
    for r in &report.results {
        for c in &r.per_class {
            writeln!(csv, "{},{},{:.9}", r.threshold, c.class_id, c.ap).unwrap();
        }
        writeln!(csv, "{},all,{:.9}", r.threshold, r.map).unwrap();
    }
    let coco = coco_average(&report);
    writeln!(csv, "0.5:0.95,all,{coco:.9}").unwrap();
    for t in [0.2, 0.5, 0.75] {
        writeln!(summary, "mAP@{t}: {:.4}", report.map_at(t).unwrap_or(0.0)).unwrap();
    }
    writeln!(summary, "mAP@0.5:0.95: {coco:.4}").unwrap();
    writeln!(
        summary,
        "tubes: {}  ground truth: {}",
        tubes.len(),
        gts.len()
    )
    .unwrap();
    ctx.write_artifact(&ctx.out.join(METRICS_CSV), &csv)?;
    ctx.write_artifact(&ctx.out.join(METRICS_TXT), &summary)?;
    print!("{summary}");
    ctx.note(summary.trim_end());
    Ok(())
}

fn ablate_cmd(ctx: &mut Ctx, axis: AblationAxis) -> CmdResult {
    let samples = ctx.load_dataset()?;
    let path = ctx.out.join(format!("ablation_{axis}.csv"));
    ctx.check_fresh(&path)?;
    fs::create_dir_all(&ctx.out).runtime()?;
    let mut file = fs::File::create(&path).runtime()?;
    writeln!(file, "{}{ABLATION_CSV_HEADER}", ctx.header()).runtime()?;
    let result = ablate(
        axis,
        &ctx.cfg.pipeline(),
        ctx.cfg.mode,
        ctx.cfg.gen.flow_quality,
        &samples,
        ctx.cfg.seed,
        |row| {
            writeln!(file, "{}", row.csv())?;
            file.flush()?;
            Ok(())
        },
    );
    let rows = result
        .with_context(|| {
            format!(
                "ablation aborted; completed rows kept in {}",
                path.display()
            )
        })
        .runtime()?;
    let mut summary = format!(
        "{:<24}{:>10}{:>14}{:>10}{:>14}\n",
        axis, "mAP@0.5", "mAP@0.5:0.95", "params", "s/frame"
    );
    for r in &rows {
        writeln!(
            summary,
            "{:<24}{:>10.4}{:>14.4}{:>10}{:>14.2e}",
            r.value, r.map_50, r.map_50_95, r.parameter_count, r.seconds_per_frame
        )
        .unwrap();
    }
    ctx.write_artifact(&ctx.out.join(format!("ablation_{axis}.txt")), &summary)?;
    print!("{summary}");
    ctx.note(format!("wrote {} rows to {}", rows.len(), path.display()));
    Ok(())
}

fn command_name(c: &Command) -> &'static str {
    match c {
        Command::GenData => "gen-data",
        Command::ComputeFlow { .. } => "compute-flow",
        Command::Train => "train",
        Command::Detect => "detect",
        Command::Link => "link",
        Command::Eval => "eval",
        Command::Ablate { .. } => "ablate",
        Command::ShowConfig => "show-config",
    }
}

fn run(cli: Cli) -> CmdResult {
    let mut cfg = match &cli.config {
        Some(path) => RunConfig::load(path).input()?,
        None => RunConfig::default(),
    };
    if let Some(seed) = cli.seed {
        cfg.set("run.seed", &seed.to_string()).input()?;
    }
    cfg.validate().input()?;
    let name = command_name(&cli.command);
    let mut ctx = Ctx {
        cfg,
        out: cli.out,
        force: cli.force,
        log: String::new(),
    };
    if let Command::ShowConfig = cli.command {
        print!("{}", ctx.cfg.to_text());
        return Ok(());
    }
    fs::create_dir_all(&ctx.out)
        .with_context(|| format!("creating {}", ctx.out.display()))
        .runtime()?;
    let started = Instant::now();
    ctx.note(format!(
        "command {name} seed {} config {} data {} model {}",
        ctx.cfg.seed,
        ctx.cfg.hash(),
        ctx.cfg.data_hash(),
        ctx.cfg.model_hash()
    ));
    let result = match cli.command {
        Command::GenData => gen_data(&mut ctx),
        Command::ComputeFlow { quality } => compute_flow(&mut ctx, quality),
        Command::Train => train_cmd(&mut ctx),
        Command::Detect => detect_cmd(&mut ctx),
        Command::Link => link_cmd(&mut ctx),
        Command::Eval => eval_cmd(&mut ctx),
        Command::Ablate { axis } => ablate_cmd(&mut ctx, axis),
        Command::ShowConfig => unreachable!(),
    };
    let status = match &result {
        Ok(()) => "ok".to_string(),
        Err(f) => format!("failed: {:#}", f.error),
    };
    ctx.note(format!(
        "wall time {:.3}s; {status}",
        started.elapsed().as_secs_f64()
    ));
    let log_path = ctx.out.join(format!("{name}.log"));
    if let Err(e) = fs::write(&log_path, &ctx.log) {
        log::warn!("could not write {}: {e}", log_path.display());
    }
    result
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("error: {:#}", f.error);
            ExitCode::from(f.code)
        }
    }
}
