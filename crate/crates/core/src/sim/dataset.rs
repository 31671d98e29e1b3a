//! Corpus generation, split pools and JSON-lines dataset manifests.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::io::{BufRead, Write};
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use super::{place_speakers, synthesize_mixture, MixtureSources, MixtureSpec, Placement, RoomSpec, Scenario};
use super::voices::{NoiseKind, NoiseSource, SyntheticSpeaker};
use crate::audio::{read_wav, write_wav};
use crate::dsp::{Waveform, SAMPLE_RATE};
use crate::embedding::{write_enrollment_manifest, EnrollmentRecord};
use crate::error::{PseError, Result};

/// Independent seed for item `index` of stream `tag`.
pub fn derive_seed(seed: u64, tag: &str, index: u64) -> u64 {
    // FNV-1a of the tag, then a splitmix64 finalizer
    let mut h = 0xcbf2_9ce4_8422_2325u64;
    for b in tag.bytes() {
        h = (h ^ b as u64).wrapping_mul(0x0100_0000_01b3);
    }
    let mut z = seed ^ h ^ index.wrapping_mul(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

pub fn read_jsonl<T: DeserializeOwned>(path: impl AsRef<Path>) -> Result<Vec<T>> {
    let path = path.as_ref();
    let file = std::fs::File::open(path).map_err(|e| PseError::InvalidInput(format!("{}: {e}", path.display())))?;
    std::io::BufReader::new(file)
        .lines()
        .filter(|l| l.as_ref().map(|s| !s.trim().is_empty()).unwrap_or(true))
        .map(|l| Ok(serde_json::from_str(&l?)?))
        .collect()
}

pub fn write_jsonl<T: Serialize>(path: impl AsRef<Path>, items: &[T]) -> Result<()> {
    if let Some(parent) = path.as_ref().parent() {
        std::fs::create_dir_all(parent)?;
    }
    let mut out = std::io::BufWriter::new(std::fs::File::create(path)?);
    for item in items {
        serde_json::to_writer(&mut out, item)?;
        out.write_all(b"\n")?;
    }
    out.flush()?;
    Ok(())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CleanUtterance {
    pub id: String,
    pub speaker_id: String,
    /// Relative to the data root.
    pub path: PathBuf,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NoiseClip {
    pub id: String,
    pub path: PathBuf,
}

/// Source material reserved for one split.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct SourcePool {
    pub speech: Vec<CleanUtterance>,
    pub noises: Vec<NoiseClip>,
    pub room_seeds: Vec<u64>,
}

impl SourcePool {
    fn speakers(&self) -> BTreeSet<&str> {
        self.speech.iter().map(|u| u.speaker_id.as_str()).collect()
    }
}

/// Fails if two pools share an utterance, a noise clip or a room.
pub fn check_disjoint(pools: &[(&str, &SourcePool)]) -> Result<()> {
    for (i, (a_name, a)) in pools.iter().enumerate() {
        for (b_name, b) in &pools[i + 1..] {
            let clash = |what: &str, x: Option<String>| match x {
                Some(id) => Err(PseError::Config(format!("{what} {id} appears in both the {a_name} and {b_name} pools"))),
                None => Ok(()),
            };
            let utt: BTreeSet<_> = a.speech.iter().map(|u| &u.id).collect();
            clash("utterance", b.speech.iter().find(|u| utt.contains(&u.id)).map(|u| u.id.clone()))?;
            let noise: BTreeSet<_> = a.noises.iter().map(|n| &n.id).collect();
            clash("noise", b.noises.iter().find(|n| noise.contains(&n.id)).map(|n| n.id.clone()))?;
            let rooms: BTreeSet<_> = a.room_seeds.iter().collect();
            clash("room", b.room_seeds.iter().find(|r| rooms.contains(r)).map(|r| r.to_string()))?;
        }
    }
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LevelRanges {
    /// Target-to-noise ratio range in dB.
    pub snr_db: (f64, f64),
    /// Target-to-interferer ratio range in dB.
    pub sir_db: (f64, f64),
}

impl Default for LevelRanges {
    fn default() -> Self {
        Self { snr_db: (0.0, 20.0), sir_db: (0.0, 10.0) }
    }
}

impl LevelRanges {
    fn validate(&self) -> Result<()> {
        for (name, (lo, hi)) in [("snr_db", self.snr_db), ("sir_db", self.sir_db)] {
            if !(lo.is_finite() && hi.is_finite() && lo <= hi) {
                return Err(PseError::Config(format!("{name} range ({lo}, {hi})")));
            }
        }
        Ok(())
    }

    fn draw(rng: &mut ChaCha8Rng, (lo, hi): (f64, f64)) -> f64 {
        if lo == hi {
            lo
        } else {
            rng.random_range(lo..hi)
        }
    }
}

/// One line of a dataset manifest.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub sample_id: String,
    pub scenario: Scenario,
    pub mixture_path: PathBuf,
    pub reference_path: PathBuf,
    pub target_speaker_id: String,
    pub target_utterance_id: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub interferer_id: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub interferer_utterance_id: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub noise_id: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub snr_db: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub sir_db: Option<f64>,
    pub room: RoomSpec,
    pub positions: Placement,
    pub seed: u64,
    pub gain: f64,
}

/// Mixture and reference pair from a manifest; enough to train or evaluate.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalItem {
    pub sample_id: String,
    pub scenario: Scenario,
    pub mixture_path: PathBuf,
    pub reference_path: PathBuf,
    pub target_speaker_id: String,
}

impl From<&ManifestEntry> for EvalItem {
    fn from(e: &ManifestEntry) -> Self {
        Self {
            sample_id: e.sample_id.clone(),
            scenario: e.scenario,
            mixture_path: e.mixture_path.clone(),
            reference_path: e.reference_path.clone(),
            target_speaker_id: e.target_speaker_id.clone(),
        }
    }
}

impl EvalItem {
    /// Reads `(mixture, reference)` below `root`.
    pub fn load(&self, root: &Path) -> Result<(Waveform, Waveform)> {
        let mix = read_wav(root.join(&self.mixture_path))?;
        let reference = read_wav(root.join(&self.reference_path))?;
        if mix.len() != reference.len() {
            return Err(PseError::Shape(format!("{}: mixture and reference lengths differ", self.sample_id)));
        }
        Ok((mix, reference))
    }
}

/// Reads any manifest (regular or long-form) as evaluation items.
pub fn read_eval_items(path: impl AsRef<Path>) -> Result<Vec<EvalItem>> {
    read_jsonl(path)
}

/// Caches decoded WAVs by relative path.
struct WavCache<'a> {
    root: &'a Path,
    loaded: HashMap<PathBuf, Waveform>,
}

impl<'a> WavCache<'a> {
    fn new(root: &'a Path) -> Self {
        Self { root, loaded: HashMap::new() }
    }

    fn get(&mut self, rel: &Path) -> Result<Waveform> {
        if let Some(w) = self.loaded.get(rel) {
            return Ok(w.clone());
        }
        let w = read_wav(self.root.join(rel))?;
        self.loaded.insert(rel.to_path_buf(), w.clone());
        Ok(w)
    }
}

/// Builds `scenarios.len()` mixtures from `pool` below `root/name/`.
fn build_split(
    root: &Path,
    name: &str,
    pool: &SourcePool,
    scenarios: &[Scenario],
    levels: &LevelRanges,
    segment_len: usize,
    seed: u64,
) -> Result<Vec<ManifestEntry>> {
    levels.validate()?;
    if pool.speech.is_empty() || pool.room_seeds.is_empty() {
        return Err(PseError::Config(format!("{name} pool needs speech and rooms")));
    }
    if scenarios.iter().any(|s| *s != Scenario::TS3) && pool.noises.is_empty() {
        return Err(PseError::Config(format!("{name} pool has no noise clips")));
    }
    if scenarios.contains(&Scenario::TS1) && pool.speakers().len() < 2 {
        return Err(PseError::Config(format!("{name} pool needs two speakers for interferer mixtures")));
    }
    let mut cache = WavCache::new(root);
    let mut entries = Vec::with_capacity(scenarios.len());
    for (i, &scenario) in scenarios.iter().enumerate() {
        let sample_seed = derive_seed(seed, name, i as u64);
        let mut rng = ChaCha8Rng::seed_from_u64(sample_seed);
        let target = &pool.speech[rng.random_range(0..pool.speech.len())];
        let interferer = (scenario == Scenario::TS1).then(|| {
            let others: Vec<_> = pool.speech.iter().filter(|u| u.speaker_id != target.speaker_id).collect();
            others[rng.random_range(0..others.len())]
        });
        let noise = (scenario != Scenario::TS3).then(|| &pool.noises[rng.random_range(0..pool.noises.len())]);
        let room = RoomSpec::random(pool.room_seeds[rng.random_range(0..pool.room_seeds.len())]);
        let positions = place_speakers(&room, rng.random())?;
        let snr_db = noise.map(|_| LevelRanges::draw(&mut rng, levels.snr_db));
        let sir_db = interferer.map(|_| LevelRanges::draw(&mut rng, levels.sir_db));
        let spec = MixtureSpec {
            scenario,
            target_speaker_id: target.speaker_id.clone(),
            interferer_id: interferer.map(|u| u.speaker_id.clone()),
            noise_id: noise.map(|n| n.id.clone()),
            snr_db,
            sir_db,
            seed: sample_seed,
        };
        let sources = MixtureSources {
            target: cache.get(&target.path)?,
            interferer: interferer.map(|u| cache.get(&u.path)).transpose()?,
            noise: noise.map(|n| cache.get(&n.path)).transpose()?,
        };
        let sample = synthesize_mixture(&spec, &sources, &room, &positions, segment_len)?;
        let sample_id = format!("{name}-{i:05}");
        let mixture_path = PathBuf::from(name).join(format!("{sample_id}_mix.wav"));
        let reference_path = PathBuf::from(name).join(format!("{sample_id}_ref.wav"));
        write_wav(root.join(&mixture_path), &sample.mixture)?;
        write_wav(root.join(&reference_path), &sample.target_reverberant)?;
        entries.push(ManifestEntry {
            sample_id,
            scenario,
            mixture_path,
            reference_path,
            target_speaker_id: spec.target_speaker_id,
            target_utterance_id: target.id.clone(),
            interferer_id: spec.interferer_id,
            interferer_utterance_id: interferer.map(|u| u.id.clone()),
            noise_id: spec.noise_id,
            snr_db,
            sir_db,
            room,
            positions,
            seed: sample_seed,
            gain: sample.metadata.gain,
        });
    }
    Ok(entries)
}

/// A split to generate: TS1 for `round(ts1_fraction * samples)` mixtures and
/// TS2 for the rest, in seeded random order.
#[derive(Debug, Clone)]
pub struct SplitRequest<'a> {
    pub name: &'a str,
    pub pool: &'a SourcePool,
    pub samples: usize,
    pub ts1_fraction: f64,
}

/// Builds every requested split below `root`, after checking that their
/// pools are disjoint. Returns one manifest per split.
pub fn build_dataset(
    root: &Path,
    splits: &[SplitRequest<'_>],
    levels: &LevelRanges,
    segment_s: f64,
    seed: u64,
) -> Result<Vec<Vec<ManifestEntry>>> {
    let named: Vec<_> = splits.iter().map(|s| (s.name, s.pool)).collect();
    check_disjoint(&named)?;
    let segment_len = segment_samples(segment_s)?;
    splits
        .iter()
        .map(|s| {
            if !(0.0..=1.0).contains(&s.ts1_fraction) {
                return Err(PseError::Config(format!("ts1_fraction {}", s.ts1_fraction)));
            }
            let ts1 = (s.ts1_fraction * s.samples as f64).round() as usize;
            let mut scenarios: Vec<_> = (0..s.samples).map(|i| if i < ts1 { Scenario::TS1 } else { Scenario::TS2 }).collect();
            scenarios.shuffle(&mut ChaCha8Rng::seed_from_u64(derive_seed(seed, s.name, u64::MAX)));
            build_split(root, s.name, s.pool, &scenarios, levels, segment_len, seed)
        })
        .collect()
}

fn segment_samples(segment_s: f64) -> Result<usize> {
    let n = (segment_s * SAMPLE_RATE as f64).round();
    if !(n >= 1.0) {
        return Err(PseError::Config(format!("segment length {segment_s} s")));
    }
    Ok(n as usize)
}

/// Splits each speaker's utterances (in id order) into the first
/// `per_speaker` for enrollment and the rest for mixtures. Fails if a
/// speaker's enrollment audio is shorter than `min_s` or nothing is left.
pub fn reserve_enrollment(
    root: &Path,
    speech: &[CleanUtterance],
    per_speaker: usize,
    min_s: f64,
) -> Result<(Vec<EnrollmentRecord>, Vec<CleanUtterance>)> {
    let mut by_speaker: BTreeMap<&str, Vec<&CleanUtterance>> = BTreeMap::new();
    for u in speech {
        by_speaker.entry(&u.speaker_id).or_default().push(u);
    }
    let mut records = Vec::new();
    let mut rest = Vec::new();
    for (speaker, mut utts) in by_speaker {
        utts.sort_by(|a, b| a.id.cmp(&b.id));
        if utts.len() <= per_speaker || per_speaker == 0 {
            return Err(PseError::InvalidInput(format!(
                "speaker {speaker} has {} utterances, need more than {per_speaker}",
                utts.len()
            )));
        }
        let (enr, mix) = utts.split_at(per_speaker);
        let mut total = 0.0;
        for u in enr {
            let reader = hound::WavReader::open(root.join(&u.path))?;
            total += reader.duration() as f64 / reader.spec().sample_rate as f64;
        }
        if total < min_s {
            return Err(PseError::InvalidInput(format!("speaker {speaker} has {total:.2} s of enrollment audio, need {min_s:.2} s")));
        }
        records.push(EnrollmentRecord { speaker_id: speaker.to_string(), wavs: enr.iter().map(|u| u.path.clone()).collect() });
        rest.extend(mix.iter().map(|u| (*u).clone()));
    }
    Ok((records, rest))
}

#[derive(Debug, Clone)]
pub struct TestSets {
    pub enrollment: Vec<EnrollmentRecord>,
    pub ts1: Vec<ManifestEntry>,
    pub ts2: Vec<ManifestEntry>,
    pub ts3: Vec<ManifestEntry>,
}

impl TestSets {
    pub fn scenario(&self, s: Scenario) -> &[ManifestEntry] {
        match s {
            Scenario::TS1 => &self.ts1,
            Scenario::TS2 => &self.ts2,
            Scenario::TS3 => &self.ts3,
        }
    }
}

/// Reserves enrollment audio for every speaker in `pool`, then builds
/// `per_scenario` mixtures for each of TS1, TS2 and TS3 from the rest.
pub fn build_test_sets(
    root: &Path,
    pool: &SourcePool,
    enrollment_per_speaker: usize,
    min_enrollment_s: f64,
    per_scenario: usize,
    levels: &LevelRanges,
    segment_s: f64,
    seed: u64,
) -> Result<TestSets> {
    let (enrollment, speech) = reserve_enrollment(root, &pool.speech, enrollment_per_speaker, min_enrollment_s)?;
    let pool = SourcePool { speech, ..pool.clone() };
    let segment_len = segment_samples(segment_s)?;
    let mut sets = Scenario::ALL.iter().map(|&s| {
        let name = format!("test_{}", s.name().to_lowercase());
        build_split(root, &name, &pool, &vec![s; per_scenario], levels, segment_len, seed)
    });
    let (ts1, ts2, ts3) = (sets.next().unwrap()?, sets.next().unwrap()?, sets.next().unwrap()?);
    Ok(TestSets { enrollment, ts1, ts2, ts3 })
}

/// One concatenated recording per target speaker.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LongFormEntry {
    pub sample_id: String,
    pub scenario: Scenario,
    pub mixture_path: PathBuf,
    pub reference_path: PathBuf,
    pub target_speaker_id: String,
    /// Concatenated sample ids, in order.
    pub parts: Vec<String>,
    pub duration_s: f64,
}

/// Concatenates each speaker's mixtures (and references) from `entries`
/// into one long file per speaker below `root/dir`.
pub fn build_long_form(root: &Path, dir: &str, entries: &[ManifestEntry]) -> Result<Vec<LongFormEntry>> {
    let mut by_speaker: BTreeMap<(&str, Scenario), Vec<&ManifestEntry>> = BTreeMap::new();
    for e in entries {
        by_speaker.entry((&e.target_speaker_id, e.scenario)).or_default().push(e);
    }
    let mut out = Vec::new();
    for ((speaker, scenario), parts) in by_speaker {
        let mut mix = Vec::new();
        let mut reference = Vec::new();
        for e in &parts {
            let (m, r) = EvalItem::from(*e).load(root)?;
            mix.extend(m.samples);
            reference.extend(r.samples);
        }
        let sample_id = format!("{}-long-{speaker}", scenario.name().to_lowercase());
        let mixture_path = PathBuf::from(dir).join(format!("{sample_id}_mix.wav"));
        let reference_path = PathBuf::from(dir).join(format!("{sample_id}_ref.wav"));
        let duration_s = mix.len() as f64 / SAMPLE_RATE as f64;
        write_wav(root.join(&mixture_path), &Waveform::new(mix, SAMPLE_RATE)?)?;
        write_wav(root.join(&reference_path), &Waveform::new(reference, SAMPLE_RATE)?)?;
        out.push(LongFormEntry {
            sample_id,
            scenario,
            mixture_path,
            reference_path,
            target_speaker_id: speaker.to_string(),
            parts: parts.iter().map(|e| e.sample_id.clone()).collect(),
            duration_s,
        });
    }
    Ok(out)
}

/// Sizes of a synthetic corpus and the datasets simulated from it.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SimConfig {
    pub train_speakers: usize,
    pub test_speakers: usize,
    pub utterances_per_speaker: usize,
    pub utterance_s: f64,
    pub enrollment_utterances: usize,
    pub min_enrollment_s: f64,
    /// Noise clips and rooms per split (train, valid, test).
    pub noises_per_split: usize,
    pub rooms_per_split: usize,
    pub train_samples: usize,
    pub valid_samples: usize,
    /// Mixtures per test scenario.
    pub test_samples: usize,
    pub segment_s: f64,
    pub ts1_fraction: f64,
    pub levels: LevelRanges,
    pub long_form: bool,
}

impl Default for SimConfig {
    fn default() -> Self {
        Self {
            train_speakers: 8,
            test_speakers: 4,
            utterances_per_speaker: 8,
            utterance_s: 4.0,
            enrollment_utterances: 2,
            min_enrollment_s: 3.0,
            noises_per_split: 6,
            rooms_per_split: 6,
            train_samples: 48,
            valid_samples: 8,
            test_samples: 8,
            segment_s: 10.0,
            ts1_fraction: 0.6,
            levels: LevelRanges::default(),
            long_form: true,
        }
    }
}

impl SimConfig {
    pub fn validate(&self) -> Result<()> {
        if self.train_speakers < 2 || self.test_speakers < 2 {
            return Err(PseError::Config("need at least two train and two test speakers".into()));
        }
        // enrollment, then at least one train and one valid utterance
        if self.utterances_per_speaker < self.enrollment_utterances + 2 {
            return Err(PseError::Config("utterances_per_speaker must exceed enrollment_utterances by 2".into()));
        }
        if self.noises_per_split == 0 || self.rooms_per_split == 0 {
            return Err(PseError::Config("noises_per_split and rooms_per_split must be positive".into()));
        }
        if !(self.utterance_s > 0.0) || !(self.segment_s > 0.0) {
            return Err(PseError::Config("durations must be positive".into()));
        }
        self.levels.validate()
    }
}

/// Paths (relative to the data root) of everything [`simulate`] writes.
pub mod layout {
    pub const CLEAN: &str = "clean.jsonl";
    pub const NOISE: &str = "noise.jsonl";
    pub const TRAIN: &str = "train.jsonl";
    pub const VALID: &str = "valid.jsonl";
    pub const ENROLLMENT: &str = "enrollment.jsonl";
    pub const TEST: [&str; 3] = ["test_ts1.jsonl", "test_ts2.jsonl", "test_ts3.jsonl"];
    pub const TEST_LONG: [&str; 3] = ["test_ts1_long.jsonl", "test_ts2_long.jsonl", "test_ts3_long.jsonl"];
}

#[derive(Debug, Clone)]
pub struct SimOutput {
    pub train: Vec<ManifestEntry>,
    pub valid: Vec<ManifestEntry>,
    pub test: TestSets,
    pub long_form: Vec<Vec<LongFormEntry>>,
}

/// Writes a synthetic speech and noise corpus below `root`, then simulates
/// train/valid mixtures and the three test sets with reserved enrollment.
/// Train and test speakers are disjoint; validation uses held-out
/// utterances of the training speakers.
pub fn simulate(root: &Path, cfg: &SimConfig, seed: u64) -> Result<SimOutput> {
    cfg.validate()?;
    std::fs::create_dir_all(root)?;
    let mut speech = Vec::new();
    let speakers = cfg.train_speakers + cfg.test_speakers;
    for s in 0..speakers {
        let id = format!("spk{s:03}");
        let voice = SyntheticSpeaker::random(&id, derive_seed(seed, "speaker", s as u64));
        for u in 0..cfg.utterances_per_speaker {
            let path = PathBuf::from("clean").join(&id).join(format!("{id}_u{u:02}.wav"));
            let w = voice.utterance(cfg.utterance_s, derive_seed(seed, &id, u as u64))?;
            write_wav(root.join(&path), &w)?;
            speech.push(CleanUtterance { id: format!("{id}_u{u:02}"), speaker_id: id.clone(), path });
        }
    }
    write_jsonl(root.join(layout::CLEAN), &speech)?;

    let split_names = ["train", "valid", "test"];
    let mut noises = Vec::new();
    let mut pools: Vec<SourcePool> = Vec::new();
    for (k, split) in split_names.iter().enumerate() {
        let mut pool = SourcePool::default();
        for n in 0..cfg.noises_per_split {
            let kind = NoiseKind::ALL[(n + k) % NoiseKind::ALL.len()];
            let src = NoiseSource { id: format!("noise-{split}-{n:02}"), kind, seed: derive_seed(seed, "noise", (k * 1000 + n) as u64) };
            let path = PathBuf::from("noise").join(format!("{}.wav", src.id));
            write_wav(root.join(&path), &src.render(cfg.utterance_s)?)?;
            pool.noises.push(NoiseClip { id: src.id.clone(), path });
        }
        pool.room_seeds = (0..cfg.rooms_per_split).map(|r| derive_seed(seed, &format!("room-{split}"), r as u64)).collect();
        noises.extend(pool.noises.iter().cloned());
        pools.push(pool);
    }
    write_jsonl(root.join(layout::NOISE), &noises)?;

    let is_train_speaker = |u: &CleanUtterance| u.speaker_id.as_str() < format!("spk{:03}", cfg.train_speakers).as_str();
    let train_speech: Vec<_> = speech.iter().filter(|u| is_train_speaker(u)).cloned().collect();
    let test_speech: Vec<_> = speech.iter().filter(|u| !is_train_speaker(u)).cloned().collect();
    let (mut enrollment, rest) = reserve_enrollment(root, &train_speech, cfg.enrollment_utterances, cfg.min_enrollment_s)?;
    // last remaining utterance of each training speaker goes to validation
    let mut by_speaker: BTreeMap<&str, Vec<&CleanUtterance>> = BTreeMap::new();
    rest.iter().for_each(|u| by_speaker.entry(&u.speaker_id).or_default().push(u));
    for utts in by_speaker.values() {
        let (last, first) = utts.split_last().expect("reserve_enrollment leaves at least one");
        pools[0].speech.extend(first.iter().map(|u| (*u).clone()));
        pools[1].speech.push((*last).clone());
    }
    pools[2].speech = test_speech;

    let requests = [
        SplitRequest { name: "train", pool: &pools[0], samples: cfg.train_samples, ts1_fraction: cfg.ts1_fraction },
        SplitRequest { name: "valid", pool: &pools[1], samples: cfg.valid_samples, ts1_fraction: cfg.ts1_fraction },
    ];
    check_disjoint(&[("train", &pools[0]), ("valid", &pools[1]), ("test", &pools[2])])?;
    let mut built = build_dataset(root, &requests, &cfg.levels, cfg.segment_s, seed)?.into_iter();
    let (train, valid) = (built.next().unwrap(), built.next().unwrap());
    write_jsonl(root.join(layout::TRAIN), &train)?;
    write_jsonl(root.join(layout::VALID), &valid)?;

    let test = build_test_sets(
        root,
        &pools[2],
        cfg.enrollment_utterances,
        cfg.min_enrollment_s,
        cfg.test_samples,
        &cfg.levels,
        cfg.segment_s,
        seed,
    )?;
    for (path, s) in layout::TEST.iter().zip(Scenario::ALL) {
        write_jsonl(root.join(path), test.scenario(s))?;
    }
    enrollment.extend(test.enrollment.iter().cloned());
    write_enrollment_manifest(root.join(layout::ENROLLMENT), &enrollment)?;

    let mut long_form = Vec::new();
    if cfg.long_form {
        for (path, s) in layout::TEST_LONG.iter().zip(Scenario::ALL) {
            let entries = build_long_form(root, "test_long", test.scenario(s))?;
            write_jsonl(root.join(path), &entries)?;
            long_form.push(entries);
        }
    }
    Ok(SimOutput { train, valid, test, long_form })
}
