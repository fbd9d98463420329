use std::fs;
use std::path::{Path, PathBuf};

use anyhow::Context;
use tokencodec::frontend::{analyze, read_wav, write_wav, DEFAULT_HOP};
use tokencodec::pipeline::{decode, encode_grid, frontend_config, tokenize};
use tokencodec::probmodel::{
    evaluate, read_model, train_context_model, train_transformer, write_model,
};
use tokencodec::rvq::{
    fit_codebooks_from_vectors, layer_errors, read_codebooks, write_codebooks, KMeansParams,
};
use tokencodec::vad_metrics::{
    confidence_profile, profile_csv, rate_csv, rate_report, vad_csv, vad_rate_report, VadTrack,
};
use tokencodec::{Bitstream, Codebooks, CodecConfig, Role, TokenGrid, TokenModel, Waveform};

use crate::errors::{Incompatible, Usage};
use crate::settings::{ModelKindArg, Settings};

/// Sorted `.wav` files directly inside `dir`.
pub fn wav_files(dir: &Path) -> anyhow::Result<Vec<PathBuf>> {
    if !dir.is_dir() {
        return Err(Usage(format!("input directory {} does not exist", dir.display())).into());
    }
    let mut files: Vec<PathBuf> = fs::read_dir(dir)
        .with_context(|| format!("listing {}", dir.display()))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.is_file() && p.extension().is_some_and(|x| x.eq_ignore_ascii_case("wav")))
        .collect();
    files.sort();
    if files.is_empty() {
        return Err(Usage(format!("no .wav files in {}", dir.display())).into());
    }
    Ok(files)
}

fn load_wav(path: &Path) -> anyhow::Result<Waveform> {
    if !path.is_file() {
        return Err(Usage(format!("input file {} does not exist", path.display())).into());
    }
    read_wav(path).with_context(|| format!("reading {}", path.display()))
}

fn load_corpus(dir: &Path) -> anyhow::Result<Vec<(PathBuf, Waveform)>> {
    let files = wav_files(dir)?;
    let mut out = Vec::with_capacity(files.len());
    for f in files {
        let w = load_wav(&f)?;
        if let Some((_, first)) = out.first() {
            let first: &Waveform = first;
            if first.sample_rate != w.sample_rate {
                return Err(Usage(format!(
                    "{} is {} Hz but the corpus is {} Hz",
                    f.display(),
                    w.sample_rate,
                    first.sample_rate
                ))
                .into());
            }
        }
        out.push((f, w));
    }
    Ok(out)
}

fn load_codebooks(path: &Path) -> anyhow::Result<Codebooks> {
    if !path.is_file() {
        return Err(Usage(format!("codebook file {} does not exist", path.display())).into());
    }
    read_codebooks(path).with_context(|| format!("reading codebooks {}", path.display()))
}

fn load_model(path: &Path, role: Role) -> anyhow::Result<TokenModel> {
    if !path.is_file() {
        return Err(Usage(format!("model file {} does not exist", path.display())).into());
    }
    let m = read_model(path).with_context(|| format!("reading model {}", path.display()))?;
    if m.role() != role {
        return Err(Incompatible(format!(
            "{} is a {} model, expected {role}",
            path.display(),
            m.role()
        ))
        .into());
    }
    Ok(m)
}

fn write_text(path: &Path, text: &str) -> anyhow::Result<()> {
    fs::write(path, text).with_context(|| format!("writing {}", path.display()))
}

/// Geometry of the settings applied to an existing codebook file.
fn codec_config(s: &Settings, cb: &Codebooks, explicit_size: bool) -> anyhow::Result<CodecConfig> {
    if explicit_size && s.codebook_size != cb.codebook_size {
        return Err(Incompatible(format!(
            "codebook size {} requested but the codebooks have {}",
            s.codebook_size, cb.codebook_size
        ))
        .into());
    }
    let cfg = CodecConfig::new(cb.codebook_size, s.nc, s.nf, cb.embed_dim)?;
    if cb.n_layers() < cfg.n_layers() {
        return Err(Incompatible(format!(
            "{} layers requested but the codebooks have {}",
            cfg.n_layers(),
            cb.n_layers()
        ))
        .into());
    }
    Ok(cfg)
}

fn check_model_fits(m: &TokenModel, cb: &Codebooks) -> anyhow::Result<()> {
    let c = m.config();
    if c.codebook_size != cb.codebook_size
        || c.embed_dim != cb.embed_dim
        || c.n_layers() > cb.n_layers()
    {
        return Err(Incompatible(format!(
            "model geometry ({} codes, {}+{} layers, dim {}) does not fit the codebooks ({} codes, {} layers, dim {})",
            c.codebook_size,
            c.n_coarse,
            c.n_fine,
            c.embed_dim,
            cb.codebook_size,
            cb.n_layers(),
            cb.embed_dim
        ))
        .into());
    }
    Ok(())
}

fn tokenize_all(
    corpus: &[(PathBuf, Waveform)],
    cb: &Codebooks,
    cfg: &CodecConfig,
) -> anyhow::Result<Vec<TokenGrid>> {
    corpus
        .iter()
        .map(|(p, w)| tokenize(w, cb, cfg).with_context(|| format!("tokenizing {}", p.display())))
        .collect()
}

pub fn fit_codebooks(s: &Settings, input: &Path, output: &Path) -> anyhow::Result<()> {
    let corpus = load_corpus(input)?;
    let cfg = CodecConfig::new(s.codebook_size, s.nc, s.nf, DEFAULT_HOP)?;
    let fcfg = frontend_config(&cfg, corpus[0].1.sample_rate);
    let mut data = Vec::new();
    for (p, w) in &corpus {
        let e = analyze(w, &fcfg).with_context(|| format!("analyzing {}", p.display()))?;
        data.extend_from_slice(&e.frames);
    }
    let params = KMeansParams {
        max_iters: s.kmeans_iters,
        ..KMeansParams::default()
    };
    let cb = fit_codebooks_from_vectors(&data, &cfg, s.seed, &params)?;
    write_codebooks(output, &cb).with_context(|| format!("writing {}", output.display()))?;
    for (layer, err) in layer_errors(&data, &cb)?.iter().enumerate() {
        println!("layer={} residual_mse={err:.6e}", layer + 1);
    }
    Ok(())
}

pub struct TrainArgs<'a> {
    pub role: Role,
    pub input: &'a Path,
    pub codebooks: &'a Path,
    pub output: &'a Path,
    pub loss_log: Option<&'a Path>,
}

pub fn train(s: &Settings, explicit_size: bool, a: TrainArgs) -> anyhow::Result<()> {
    let cb = load_codebooks(a.codebooks)?;
    let cfg = codec_config(s, &cb, explicit_size)?;
    if a.role == Role::Fine && cfg.n_fine == 0 {
        return Err(Usage("a fine model needs --nf > 0".into()).into());
    }
    let corpus = load_corpus(a.input)?;
    let grids = tokenize_all(&corpus, &cb, &cfg)?;
    let model = match s.kind {
        ModelKindArg::Context => train_context_model(&grids, a.role, s.order, &cfg)?,
        ModelKindArg::Transformer => {
            let (m, log) = train_transformer(&grids, a.role, &cfg, &s.transformer, s.seed)?;
            let path = a
                .loss_log
                .map(Path::to_path_buf)
                .unwrap_or_else(|| a.output.with_extension("loss.csv"));
            write_text(&path, &log.to_csv())?;
            log::info!("loss curve written to {}", path.display());
            m
        }
    };
    write_model(&model, a.output).with_context(|| format!("writing {}", a.output.display()))?;
    let eval = evaluate(&model, &grids)?;
    println!(
        "role={} kind={:?} model_id={} train_accuracy={:.6} train_bits_per_symbol={:.6}",
        a.role,
        s.kind,
        model.model_id(),
        eval.accuracy(),
        eval.bits_per_symbol()
    );
    Ok(())
}

pub struct EncodeArgs<'a> {
    pub input: &'a Path,
    pub codebooks: &'a Path,
    pub coarse_model: &'a Path,
    pub fine_model: Option<&'a Path>,
    pub output: &'a Path,
}

pub fn encode(s: &Settings, explicit_size: bool, a: EncodeArgs) -> anyhow::Result<()> {
    let cb = load_codebooks(a.codebooks)?;
    let cfg = codec_config(s, &cb, explicit_size)?;
    let coarse = load_model(a.coarse_model, Role::Coarse)?;
    check_model_fits(&coarse, &cb)?;
    let mc = coarse.config();
    if mc.n_coarse != cfg.n_coarse {
        return Err(Incompatible(format!(
            "coarse model codes {} layers, --nc is {}",
            mc.n_coarse, cfg.n_coarse
        ))
        .into());
    }
    let fine = a
        .fine_model
        .map(|p| load_model(p, Role::Fine))
        .transpose()?;
    if let Some(f) = &fine {
        if f.config() != &cfg {
            return Err(Incompatible(format!(
                "fine model geometry {:?} differs from {:?}",
                f.config(),
                cfg
            ))
            .into());
        }
    }
    let w = load_wav(a.input)?;
    let g = tokenize(&w, &cb, &cfg)?;
    let mut b = encode_grid(&g, &coarse, w.sample_rate, s.mode)?;
    if let Some(f) = &fine {
        b.header.fine_model_id = f.model_id();
    }
    fs::write(a.output, b.to_bytes()).with_context(|| format!("writing {}", a.output.display()))?;
    let secs = g.n_frames() as f64 * cfg.embed_dim as f64 / w.sample_rate as f64;
    println!(
        "mode={} frames={} duration_secs={secs:.6} payload_bits={} bps={:.6}",
        s.mode,
        g.n_frames(),
        b.bit_count,
        b.bits_per_second()
    );
    Ok(())
}

pub struct DecodeArgs<'a> {
    pub input: &'a Path,
    pub codebooks: &'a Path,
    pub coarse_model: &'a Path,
    pub fine_model: Option<&'a Path>,
    pub output: &'a Path,
    pub grid_csv: Option<&'a Path>,
}

pub fn decode_cmd(s: &Settings, a: DecodeArgs) -> anyhow::Result<()> {
    if !a.input.is_file() {
        return Err(Usage(format!("bitstream {} does not exist", a.input.display())).into());
    }
    let bytes = fs::read(a.input).with_context(|| format!("reading {}", a.input.display()))?;
    let b =
        Bitstream::from_bytes(&bytes).with_context(|| format!("parsing {}", a.input.display()))?;
    let cb = load_codebooks(a.codebooks)?;
    let coarse = load_model(a.coarse_model, Role::Coarse)?;
    let fine = a
        .fine_model
        .map(|p| load_model(p, Role::Fine))
        .transpose()?;
    if fine.is_none() && b.header.n_fine > 0 {
        log::warn!("no fine model given; fine layers are left at zero");
    }
    let sampler = s.sampler_config();
    sampler.validate(b.header.codebook_size as usize)?;
    let (grid, w) = decode(&b, &cb, &coarse, fine.as_ref(), sampler)?;
    write_wav(a.output, &w).with_context(|| format!("writing {}", a.output.display()))?;
    if let Some(p) = a.grid_csv {
        write_text(p, &grid.to_csv())?;
    }
    println!(
        "frames={} samples={} sample_rate={}",
        grid.n_frames(),
        w.len(),
        w.sample_rate
    );
    Ok(())
}

pub struct ReportArgs<'a> {
    pub input: &'a Path,
    pub codebooks: &'a Path,
    pub coarse_model: &'a Path,
    pub fine_model: Option<&'a Path>,
    pub output: &'a Path,
    pub json: Option<&'a Path>,
    pub profile_dir: Option<&'a Path>,
}

/// Coarse model, codebooks and the corpus tokenized at the model's geometry.
fn report_inputs(
    input: &Path,
    codebooks: &Path,
    coarse_model: &Path,
) -> anyhow::Result<(Vec<(PathBuf, Waveform)>, TokenModel, Vec<TokenGrid>, f64)> {
    let cb = load_codebooks(codebooks)?;
    let coarse = load_model(coarse_model, Role::Coarse)?;
    check_model_fits(&coarse, &cb)?;
    let cfg = *coarse.config();
    let corpus = load_corpus(input)?;
    let grids = tokenize_all(&corpus, &cb, &cfg)?;
    let frame_rate = frontend_config(&cfg, corpus[0].1.sample_rate).frame_rate();
    Ok((corpus, coarse, grids, frame_rate))
}

pub fn report(a: ReportArgs) -> anyhow::Result<()> {
    let (corpus, coarse, grids, frame_rate) = report_inputs(a.input, a.codebooks, a.coarse_model)?;
    let fine = a
        .fine_model
        .map(|p| load_model(p, Role::Fine))
        .transpose()?;
    if let Some(f) = &fine {
        if f.config() != coarse.config() {
            return Err(Incompatible(format!(
                "fine model geometry {:?} differs from the coarse model's {:?}",
                f.config(),
                coarse.config()
            ))
            .into());
        }
    }
    let r = rate_report(&grids, &coarse, fine.as_ref(), frame_rate)?;
    write_text(a.output, &rate_csv(std::slice::from_ref(&r)))?;
    if let Some(p) = a.json {
        write_text(p, &(serde_json::to_string_pretty(&[&r])? + "\n"))?;
    }
    if let Some(dir) = a.profile_dir {
        fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
        for ((path, _), g) in corpus.iter().zip(&grids) {
            let rows = confidence_profile(&coarse, g, None)?;
            let stem = path.file_stem().unwrap_or_default().to_string_lossy();
            write_text(&dir.join(format!("{stem}.csv")), &profile_csv(&rows))?;
        }
    }
    print!("{}", rate_csv(std::slice::from_ref(&r)));
    Ok(())
}

pub struct VadReportArgs<'a> {
    pub input: &'a Path,
    pub codebooks: &'a Path,
    pub coarse_model: &'a Path,
    pub output: &'a Path,
    pub json: Option<&'a Path>,
}

pub fn vad_report(s: &Settings, a: VadReportArgs) -> anyhow::Result<()> {
    let (corpus, coarse, grids, frame_rate) = report_inputs(a.input, a.codebooks, a.coarse_model)?;
    let mut rows = Vec::with_capacity(grids.len());
    for ((path, w), g) in corpus.iter().zip(&grids) {
        let track = VadTrack::from_waveform(w, &s.vad)?;
        let r = vad_rate_report(g, &coarse, &track, &s.vad, frame_rate)
            .with_context(|| format!("scoring {}", path.display()))?;
        rows.push(r);
    }
    write_text(a.output, &vad_csv(&rows))?;
    if let Some(p) = a.json {
        write_text(p, &(serde_json::to_string_pretty(&rows)? + "\n"))?;
    }
    print!("{}", vad_csv(&rows));
    Ok(())
}
