use std::fs;
use std::path::{Path, PathBuf};

use sgalign_core::align::{align_train, AlignConfig, AlignLog, AlignmentParams, GanKind, MappingMode};
use sgalign_core::checkpoint::{alignment_checkpoint, caption_checkpoint, load_alignment, load_caption, Checkpoint};
use sgalign_core::corpus::{generate, ingest_image_graphs, make_unpaired, sentences_from_text, sentences_to_text, split, DualGrammar, BUILTIN_COARSENING};
use sgalign_core::decoder::AttentionVariant;
use sgalign_core::encoder::IndexedGraph;
use sgalign_core::model::{AttendedFeatures, CaptionModel};
use sgalign_core::parser::parse;
use sgalign_core::pipeline::{caption_words_with, example_features, graph_features, restrict_to_vocab, score, Scores, TextData};
use sgalign_core::scenegraph::{serialize_all, GraphRecord, Modality, SceneGraph};
use sgalign_core::training::{train_text, EpochLog, TextExample};
use sgalign_core::{Error, Result};

use crate::config::RunConfig;

pub const TRAIN_SENTENCES: &str = "train_sentences.txt";
pub const VAL_SENTENCES: &str = "val_sentences.txt";
pub const TEST_SENTENCES: &str = "test_sentences.txt";
pub const TRAIN_IMAGES: &str = "train_images.sg";
pub const TEST_IMAGES: &str = "test_images.sg";
pub const COARSENING: &str = "coarsen.txt";
pub const TEXT_CHECKPOINT: &str = "text.ckpt";
pub const ALIGN_CHECKPOINT: &str = "align.ckpt";

/// A run directory with its validated configuration.
pub struct Run {
    pub dir: PathBuf,
    pub config: RunConfig,
}

impl Run {
    /// Opens `dir`, taking the configuration from `config_file`, else from
    /// the snapshot already in the directory, else the defaults. The
    /// effective configuration and seed are written back as the snapshot.
    pub fn open(dir: PathBuf, config_file: Option<&Path>) -> Result<Self> {
        let snapshot = dir.join("config.toml");
        let config = match config_file {
            Some(p) => RunConfig::load(p)?,
            None if snapshot.exists() => RunConfig::load(&snapshot)?,
            None => RunConfig::default(),
        };
        fs::create_dir_all(dir.join("logs")).map_err(|e| io(&dir, e))?;
        write(&snapshot, &config.to_toml())?;
        write(&dir.join("seed"), &format!("{}\n", config.seed))?;
        Ok(Self { dir, config })
    }

    pub fn data(&self, name: &str) -> PathBuf {
        self.dir.join(&self.config.data_dir).join(name)
    }

    pub fn log(&self, name: &str) -> PathBuf {
        self.dir.join("logs").join(name)
    }

    fn text_model(&self, path: Option<&Path>) -> Result<CaptionModel> {
        let path = path.map(Path::to_path_buf).unwrap_or_else(|| self.dir.join(TEXT_CHECKPOINT));
        let ck = Checkpoint::load(&path)?;
        ck.require_config(&self.config.text_hash())?;
        load_caption(&ck)
    }

    fn sentences(&self, name: &str) -> Result<Vec<Vec<String>>> {
        Ok(sentences_from_text(&read(&self.data(name))?))
    }

    fn text_data(&self, heldout: &str) -> Result<TextData> {
        let grammar = DualGrammar::builtin();
        TextData::prepare(
            &grammar.grammar.lexicon,
            &self.sentences(TRAIN_SENTENCES)?,
            &self.sentences(heldout)?,
            self.config.word_min_count,
            self.config.graph_min_count,
        )
    }
}

fn io(path: &Path, source: std::io::Error) -> Error {
    Error::Io {
        path: path.to_path_buf(),
        source,
    }
}

fn read(path: &Path) -> Result<String> {
    fs::read_to_string(path).map_err(|e| io(path, e))
}

fn write(path: &Path, text: &str) -> Result<()> {
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent).map_err(|e| io(parent, e))?;
    }
    let tmp = path.with_extension("tmp");
    fs::write(&tmp, text).map_err(|e| io(&tmp, e))?;
    fs::rename(&tmp, path).map_err(|e| io(path, e))
}

fn image_records(graphs: Vec<SceneGraph>, prefix: &str) -> Vec<GraphRecord> {
    graphs
        .into_iter()
        .enumerate()
        .map(|(i, g)| GraphRecord::new(format!("{prefix}{i}"), g))
        .collect()
}

/// Loads an image-side graph file, failing on any rejected record.
fn load_graphs(path: &Path) -> Result<Vec<GraphRecord>> {
    let ingested = ingest_image_graphs(path)?;
    for w in &ingested.warnings {
        eprintln!("warning: {}: {w}", path.display());
    }
    if let Some(r) = ingested.rejected.first() {
        return Err(Error::MalformedGraph(format!(
            "{}: record at line {}: {} ({} rejected)",
            path.display(),
            r.line,
            r.reason,
            ingested.rejected.len()
        )));
    }
    Ok(ingested.records)
}

pub fn gen_data(run: &Run) -> Result<String> {
    let c = &run.config;
    let grammar = DualGrammar::builtin();
    let samples = generate(&grammar, c.corpus_size, c.seed)?;
    let s = split(&samples, c.seed);
    let (train_images, train_sentences) = make_unpaired(&s.train, c.seed)?;
    let val: Vec<Vec<String>> = s.val.iter().map(|x| x.sentence.clone()).collect();
    let test: Vec<Vec<String>> = s.test.iter().map(|x| x.sentence.clone()).collect();
    let test_images: Vec<SceneGraph> = s.test.iter().map(|x| x.image.clone()).collect();
    write(&run.data(TRAIN_SENTENCES), &sentences_to_text(&train_sentences))?;
    write(&run.data(VAL_SENTENCES), &sentences_to_text(&val))?;
    write(&run.data(TEST_SENTENCES), &sentences_to_text(&test))?;
    write(&run.data(TRAIN_IMAGES), &serialize_all(&image_records(train_images, "train-")))?;
    write(&run.data(TEST_IMAGES), &serialize_all(&image_records(test_images, "test-")))?;
    write(&run.data(COARSENING), BUILTIN_COARSENING)?;
    let summary = format!(
        "train\t{}\nval\t{}\ntest\t{}\n",
        s.train.len(),
        s.val.len(),
        s.test.len()
    );
    write(&run.log("gen-data.tsv"), &summary)?;
    Ok(summary)
}

fn train_variant(run: &Run, data: &TextData, variant: AttentionVariant, checkpoint: Option<&Path>) -> Result<CaptionModel> {
    let c = &run.config;
    let mut model = CaptionModel::new(data.graph_vocab.clone(), data.word_vocab.clone(), c.dims(), variant, c.seed);
    let hash = c.text_hash();
    let mut log = format!("{}\n", EpochLog::HEADER);
    train_text(&mut model, &data.train, &data.heldout, &c.train_config(), |l, m| {
        eprintln!("{variant} {}", l.to_row());
        if let Some(path) = checkpoint {
            log.push_str(&l.to_row());
            log.push('\n');
            caption_checkpoint(m, &hash).save(path)?;
            write(&run.log("train-text.tsv"), &log)?;
        }
        Ok(())
    })?;
    Ok(model)
}

pub fn train_text_cmd(run: &Run) -> Result<String> {
    let data = run.text_data(VAL_SENTENCES)?;
    let path = run.dir.join(TEXT_CHECKPOINT);
    let model = train_variant(run, &data, run.config.variant, Some(&path))?;
    caption_checkpoint(&model, &run.config.text_hash()).save(&path)?;
    Ok(format!("{}\n", path.display()))
}

/// Sentence-side features of the training sentences under `model`.
fn sentence_features(run: &Run, model: &CaptionModel) -> Result<AttendedFeatures> {
    let lexicon = DualGrammar::builtin().grammar.lexicon;
    let examples: Vec<TextExample> = run
        .sentences(TRAIN_SENTENCES)?
        .iter()
        .filter_map(|s| {
            let graph = model.index(&parse(s, &lexicon).ok()?).ok()?;
            Some(TextExample {
                graph,
                target: model.word_vocab.encode(s),
            })
        })
        .collect();
    if examples.is_empty() {
        return Err(Error::EmptyInput("no training sentence indexes under the text model".into()));
    }
    example_features(model, &examples)
}

/// Features of loaded graphs. Symbols the text model never saw are an error
/// unless `prune` is set, in which case they are dropped; graphs left without
/// objects are then skipped when `skip_empty` is set and are an error
/// otherwise.
fn image_features(model: &CaptionModel, records: &[GraphRecord], prune: bool, skip_empty: bool) -> Result<AttendedFeatures> {
    if !prune {
        let graphs: Vec<SceneGraph> = records.iter().map(|r| r.graph.clone()).collect();
        return graph_features(model, &graphs);
    }
    let mut graphs = Vec::with_capacity(records.len());
    let mut pruned = 0;
    for r in records {
        let (g, removed) = restrict_to_vocab(&r.graph, &model.graph_vocab);
        if g.objects.is_empty() {
            if skip_empty {
                continue;
            }
            return Err(Error::EmptyInput(format!("graph `{}` has no object known to the text model", r.id)));
        }
        pruned += usize::from(removed > 0);
        graphs.push(g);
    }
    if pruned > 0 {
        eprintln!("warning: {pruned} of {} graphs lost symbols missing from the text vocabulary", records.len());
    }
    if graphs.is_empty() {
        return Err(Error::EmptyInput("no graph has an object known to the text model".into()));
    }
    graph_features(model, &graphs)
}

fn train_alignment(run: &Run, model: &CaptionModel, config: &AlignConfig) -> Result<(AlignmentParams, Vec<AlignLog>)> {
    let image = image_features(model, &load_graphs(&run.data(TRAIN_IMAGES))?, run.config.prune_unknown, true)?;
    let sentence = sentence_features(run, model)?;
    align_train(&image, &sentence, config)
}

pub fn align(run: &Run, text: Option<&Path>) -> Result<String> {
    let model = run.text_model(text)?;
    let (params, logs) = train_alignment(run, &model, &run.config.align_config())?;
    let mut log = format!("{}\n", AlignLog::HEADER);
    for l in &logs {
        log.push_str(&l.to_row());
        log.push('\n');
    }
    write(&run.log("align.tsv"), &log)?;
    let path = run.dir.join(ALIGN_CHECKPOINT);
    alignment_checkpoint(&params, &run.config.align_hash()).save(&path)?;
    Ok(format!("{}\n", path.display()))
}

/// Captions every record in `graphs`. Image-side graphs go through the
/// alignment mapper when one is given; sentence-side graphs never do.
fn caption_records(
    config: &RunConfig,
    model: &CaptionModel,
    mapper: Option<&AlignmentParams>,
    records: &[GraphRecord],
    beam: usize,
) -> Result<Vec<Vec<String>>> {
    if records.is_empty() {
        return Ok(Vec::new());
    }
    let features = image_features(model, records, config.prune_unknown, false)?;
    let words = |f: &AttendedFeatures| caption_words_with(model, f, beam, config.length_normalize);
    let plain = words(&features)?;
    let Some(mapper) = mapper else {
        return Ok(plain);
    };
    let mapped = words(&mapper.map_to_sentence_space(&features)?)?;
    Ok(records
        .iter()
        .zip(plain.into_iter().zip(mapped))
        .map(|(r, (p, m))| if r.graph.modality == Modality::Image { m } else { p })
        .collect())
}

pub struct CaptionArgs<'a> {
    pub graphs: &'a Path,
    pub text: Option<&'a Path>,
    pub align: Option<&'a Path>,
    pub no_align: bool,
    pub beam: Option<usize>,
}

pub fn caption(run: &Run, args: &CaptionArgs) -> Result<String> {
    let model = run.text_model(args.text)?;
    let mapper = if args.no_align {
        None
    } else {
        let path = args.align.map(Path::to_path_buf).unwrap_or_else(|| run.dir.join(ALIGN_CHECKPOINT));
        if args.align.is_none() && !path.exists() {
            eprintln!("warning: no alignment checkpoint at {}, captioning unmapped features", path.display());
            None
        } else {
            let ck = Checkpoint::load(&path)?;
            ck.require_config(&run.config.align_hash())?;
            Some(load_alignment(&ck)?)
        }
    };
    let records = load_graphs(args.graphs)?;
    let beam = args.beam.unwrap_or(run.config.beam);
    if beam == 0 {
        return Err(Error::Config("beam must be at least 1".into()));
    }
    let captions = caption_records(&run.config, &model, mapper.as_ref(), &records, beam)?;
    Ok(captions.iter().map(|c| format!("{}\n", c.join(" "))).collect())
}

fn score_table(scores: &Scores) -> String {
    let mut out = String::from("metric\tvalue\n");
    for (name, v) in scores.pairs() {
        out.push_str(&format!("{name}\t{v:.6}\n"));
    }
    out
}

pub fn evaluate(hyps: &Path, refs: &Path) -> Result<String> {
    let h = sentences_from_text(&read(hyps)?);
    let r: Vec<Vec<Vec<String>>> = sentences_from_text(&read(refs)?).into_iter().map(|s| vec![s]).collect();
    if h.len() != r.len() {
        return Err(Error::Dimension(format!("{} captions for {} references", h.len(), r.len())));
    }
    if h.is_empty() {
        return Err(Error::EmptyInput("no captions to evaluate".into()));
    }
    let grammar = DualGrammar::builtin();
    Ok(score_table(&score(&h, &r, &grammar.grammar.lexicon)?))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, clap::ValueEnum)]
pub enum Table {
    /// Text reconstruction per decoder variant.
    #[value(name = "2")]
    Reconstruction,
    /// Unmapped image-side captioning per decoder variant.
    #[value(name = "3")]
    Unmapped,
    /// GAN loss kinds against discriminator output widths.
    #[value(name = "4")]
    GanLosses,
    /// Separate, shared and single mappings.
    #[value(name = "5")]
    Mappings,
}

fn grid_row(label: &str, scores: &Scores) -> String {
    format!("{label}\t{}\n", scores.row())
}

pub fn ablate(run: &Run, table: Table, text: Option<&Path>) -> Result<String> {
    let c = &run.config;
    let grammar = DualGrammar::builtin();
    let lexicon = &grammar.grammar.lexicon;
    let test_records = load_graphs(&run.data(TEST_IMAGES))?;
    let refs: Vec<Vec<Vec<String>>> = run.sentences(TEST_SENTENCES)?.into_iter().map(|s| vec![s]).collect();
    if refs.len() != test_records.len() {
        return Err(Error::Dimension(format!("{} test graphs for {} references", test_records.len(), refs.len())));
    }
    let mut out = format!("config\t{}\n", Scores::HEADER);
    match table {
        Table::Reconstruction | Table::Unmapped => {
            let data = run.text_data(TEST_SENTENCES)?;
            for variant in AttentionVariant::ALL {
                let model = train_variant(run, &data, variant, None)?;
                let scores = if table == Table::Reconstruction {
                    let graphs: Vec<IndexedGraph> = data.heldout.iter().map(|e| e.graph.clone()).collect();
                    let hyps: Vec<Vec<String>> = model
                        .caption_graphs(&graphs, c.beam)?
                        .iter()
                        .map(|h| model.words(h))
                        .collect::<Result<_>>()?;
                    let targets: Vec<Vec<Vec<String>>> = data
                        .heldout
                        .iter()
                        .map(|e| Ok(vec![model.words(&e.target)?]))
                        .collect::<Result<_>>()?;
                    score(&hyps, &targets, lexicon)?
                } else {
                    score(&caption_records(c, &model, None, &test_records, c.beam)?, &refs, lexicon)?
                };
                out.push_str(&grid_row(variant.label(), &scores));
            }
        }
        Table::GanLosses | Table::Mappings => {
            let model = run.text_model(text)?;
            let base = c.align_config();
            let grid: Vec<(String, AlignConfig)> = if table == Table::GanLosses {
                GanKind::ALL
                    .iter()
                    .flat_map(|&kind| {
                        [(1, "1"), (64, "64"), (c.d_f, "d_f")].map(|(out_dim, name)| {
                            (format!("{}/{name}", kind.label()), AlignConfig { kind, out_dim, ..base.clone() })
                        })
                    })
                    .collect()
            } else {
                MappingMode::ALL
                    .iter()
                    .map(|&mode| (mode.label().to_string(), AlignConfig { mode, ..base.clone() }))
                    .collect()
            };
            for (label, config) in grid {
                let (params, _) = train_alignment(run, &model, &config)?;
                let hyps = caption_records(c, &model, Some(&params), &test_records, c.beam)?;
                out.push_str(&grid_row(&label, &score(&hyps, &refs, lexicon)?));
            }
        }
    }
    let name = match table {
        Table::Reconstruction => "ablate-2.tsv",
        Table::Unmapped => "ablate-3.tsv",
        Table::GanLosses => "ablate-4.tsv",
        Table::Mappings => "ablate-5.tsv",
    };
    write(&run.log(name), &out)?;
    Ok(out)
}
