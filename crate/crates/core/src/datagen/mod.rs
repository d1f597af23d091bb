//! Synthetic paired-image pipeline: prompts → generated candidates → two
//! rejection filters → a JSON-lines dataset manifest with QA pairs.

pub mod grammar;
pub mod procedural;

use std::collections::{BTreeMap, HashMap, HashSet};
use std::io::{BufRead, BufReader};
use std::path::{Path, PathBuf};

use log::warn;
use rand::seq::IndexedRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{PlvmError, Result};
use crate::image::Image;
use crate::prompting::templates::{QaTemplate, TemplateBank, TemplateId, TemplateKind, PLACEHOLDER};
use crate::training::{AttributeQa, Dataset, IdentityPool, Polarity, TaskKind, TrainingSample};

pub use grammar::{ColorTerm, PromptGrammar};
pub use procedural::{ColorClipScorer, GroundTruthAnswerer, IdentityAttributes, PixelFaceScorer, ProceduralGenerator};

pub const DATA_VERSION: &str = "plvm-data-v1";

pub trait ImageGenerator {
    fn name(&self) -> &str;
    /// One image of the reference's identity as described by `prompt`.
    fn generate(&self, reference: &Image, prompt: &str, seed: u64) -> Result<Image>;
}

/// Image–text agreement in [−1, 1].
pub trait ClipScorer {
    fn score(&self, image: &Image, prompt: &str) -> Result<f64>;
}

/// Identity agreement in [−1, 1].
pub trait FaceScorer {
    fn score(&self, reference: &Image, candidate: &Image) -> Result<f64>;
}

/// Produces attribute answers (with the `⟨sks⟩` placeholder) from the
/// reference image alone.
pub trait AttributeAnswerer {
    fn answer(&self, identity_id: &str, reference: &Image, template: &QaTemplate) -> Option<String>;
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Thresholds {
    pub clip_min: f64,
    pub face_min: f64,
}

impl Default for Thresholds {
    fn default() -> Self {
        Self {
            clip_min: 0.2,
            face_min: 0.5,
        }
    }
}

impl Thresholds {
    /// Rejects only scores strictly below a threshold.
    pub fn keeps(&self, clip: f64, face: f64) -> bool {
        clip >= self.clip_min && face >= self.face_min
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CandidateStatus {
    Pending,
    Kept,
    Rejected,
    Failed,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SynthesisCandidate {
    pub candidate_id: String,
    pub identity_id: String,
    pub reference_image_id: String,
    pub prompt: String,
    #[serde(skip)]
    pub generated_image: Option<Image>,
    pub clip_similarity: Option<f64>,
    pub face_similarity: Option<f64>,
    pub kept: bool,
    pub status: CandidateStatus,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub reason: Option<String>,
}

/// A reference image and the identity it shows.
#[derive(Clone, Debug)]
pub struct Reference {
    pub identity_id: String,
    pub image: Image,
}

impl Reference {
    pub fn image_id(&self) -> String {
        format!("{}/ref", self.identity_id)
    }
}

/// `per_ref` candidates for one reference, prompts drawn without replacement
/// where possible.
pub fn synthesize(
    reference: &Reference,
    prompts: &[String],
    generator: &dyn ImageGenerator,
    per_ref: usize,
    rng: &mut impl Rng,
) -> Result<Vec<SynthesisCandidate>> {
    if per_ref == 0 || prompts.is_empty() {
        return Err(PlvmError::InvalidConfig("per_ref must be ≥ 1 and prompts non-empty".into()));
    }
    let chosen: Vec<&String> = if per_ref <= prompts.len() {
        prompts.choose_multiple(rng, per_ref).collect()
    } else {
        (0..per_ref).map(|_| prompts.choose(rng).expect("non-empty")).collect()
    };
    Ok(chosen
        .into_iter()
        .enumerate()
        .map(|(i, prompt)| {
            let candidate_id = format!("{}/q{i}", reference.identity_id);
            let generated = generator.generate(&reference.image, prompt, rng.random());
            let (generated_image, status, reason) = match generated {
                Ok(mut img) => {
                    img.id = candidate_id.clone();
                    (Some(img), CandidateStatus::Pending, None)
                }
                Err(e) => {
                    warn!("generation failed for {candidate_id}: {e}");
                    (None, CandidateStatus::Failed, Some(format!("generator: {e}")))
                }
            };
            SynthesisCandidate {
                candidate_id,
                identity_id: reference.identity_id.clone(),
                reference_image_id: reference.image_id(),
                prompt: prompt.clone(),
                generated_image,
                clip_similarity: None,
                face_similarity: None,
                kept: false,
                status,
                reason,
            }
        })
        .collect())
}

/// Scores every generated candidate and applies the thresholds; returns the
/// kept candidate ids. Scores are recorded on every candidate.
pub fn score_and_filter(
    candidates: &mut [SynthesisCandidate],
    references: &HashMap<String, Image>,
    clip: &dyn ClipScorer,
    face: &dyn FaceScorer,
    thresholds: Thresholds,
) -> Vec<String> {
    let mut kept = Vec::new();
    for c in candidates.iter_mut() {
        let Some(img) = &c.generated_image else {
            c.status = CandidateStatus::Failed;
            c.kept = false;
            continue;
        };
        let scores = references
            .get(&c.reference_image_id)
            .ok_or_else(|| PlvmError::Manifest(format!("unknown reference `{}`", c.reference_image_id)))
            .and_then(|r| Ok((clip.score(img, &c.prompt)?, face.score(r, img)?)));
        match scores {
            Ok((cs, fs)) => {
                c.clip_similarity = Some(cs);
                c.face_similarity = Some(fs);
                c.kept = thresholds.keeps(cs, fs);
                c.status = if c.kept { CandidateStatus::Kept } else { CandidateStatus::Rejected };
                c.reason = (!c.kept).then(|| {
                    match (cs < thresholds.clip_min, fs < thresholds.face_min) {
                        (true, true) => "clip,face",
                        (true, false) => "clip",
                        _ => "face",
                    }
                    .to_string()
                });
                if c.kept {
                    kept.push(c.candidate_id.clone());
                }
            }
            Err(e) => {
                warn!("scoring failed for {}: {e}", c.candidate_id);
                c.kept = false;
                c.status = CandidateStatus::Rejected;
                c.reason = Some("score_error".into());
            }
        }
    }
    kept
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ManifestStats {
    pub generated: usize,
    pub kept: usize,
    pub rejected: usize,
    pub failed: usize,
    pub identities_dropped: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ManifestHeader {
    pub version: String,
    pub seed: u64,
    pub thresholds: Thresholds,
    pub per_ref: usize,
    pub generator: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ManifestIdentity {
    pub identity_id: String,
    pub reference_image_id: String,
    pub query_image_ids: Vec<String>,
    pub attributes: Vec<AttributeQa>,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ImageRole {
    Reference,
    Query,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ManifestImage {
    pub image_id: String,
    pub identity_id: String,
    pub role: ImageRole,
    /// Relative to the manifest's directory.
    pub path: PathBuf,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub candidate_id: Option<String>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub header: ManifestHeader,
    pub identities: Vec<ManifestIdentity>,
    pub images: Vec<ManifestImage>,
    pub candidates: Vec<SynthesisCandidate>,
    pub qa_pairs: Vec<TrainingSample>,
    pub stats: ManifestStats,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "record", rename_all = "snake_case")]
enum Record {
    Header(ManifestHeader),
    Identity(ManifestIdentity),
    Image(ManifestImage),
    Candidate(SynthesisCandidate),
    Qa(TrainingSample),
    Stats(ManifestStats),
}

/// Groups kept candidates into identities and materializes QA pairs: one
/// positive and one cross-identity negative per kept query, plus every
/// attribute question the answerer can handle.
pub fn build_manifest(
    header: ManifestHeader,
    references: &[Reference],
    candidates: Vec<SynthesisCandidate>,
    bank: &TemplateBank,
    answerer: &dyn AttributeAnswerer,
) -> Result<DatasetManifest> {
    if references.len() < 2 {
        return Err(PlvmError::EmptyStratum("need at least two identities for negatives".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(header.seed ^ 0x9a);
    let mut stats = ManifestStats {
        generated: candidates.len(),
        ..Default::default()
    };
    let mut by_identity: BTreeMap<&str, Vec<&SynthesisCandidate>> = BTreeMap::new();
    for c in &candidates {
        match c.status {
            CandidateStatus::Kept if c.kept => {
                stats.kept += 1;
                by_identity.entry(&c.identity_id).or_default().push(c);
            }
            CandidateStatus::Failed => stats.failed += 1,
            _ => stats.rejected += 1,
        }
    }
    let mut identities = Vec::new();
    let mut images = Vec::new();
    for r in references {
        let Some(kept) = by_identity.get(r.identity_id.as_str()) else {
            warn!("identity `{}` has no kept images; dropped", r.identity_id);
            stats.identities_dropped += 1;
            continue;
        };
        let attributes: Vec<AttributeQa> = bank
            .of_kind(TemplateKind::Attribute)
            .iter()
            .filter_map(|t| {
                answerer.answer(&r.identity_id, &r.image, t).map(|answer| AttributeQa {
                    template_id: t.id,
                    question: t.question.clone(),
                    answer,
                })
            })
            .collect();
        images.push(ManifestImage {
            image_id: r.image_id(),
            identity_id: r.identity_id.clone(),
            role: ImageRole::Reference,
            path: image_path(&r.image_id()),
            candidate_id: None,
        });
        for c in kept {
            images.push(ManifestImage {
                image_id: c.candidate_id.clone(),
                identity_id: r.identity_id.clone(),
                role: ImageRole::Query,
                path: image_path(&c.candidate_id),
                candidate_id: Some(c.candidate_id.clone()),
            });
        }
        identities.push(ManifestIdentity {
            identity_id: r.identity_id.clone(),
            reference_image_id: r.image_id(),
            query_image_ids: kept.iter().map(|c| c.candidate_id.clone()).collect(),
            attributes,
        });
    }
    if identities.len() < 2 {
        return Err(PlvmError::EmptyStratum("fewer than two identities survived filtering".into()));
    }
    let mut qa_pairs = Vec::new();
    let render = |rng: &mut ChaCha8Rng, kind| -> Result<(String, String)> {
        let n = bank.of_kind(kind).len() as u32;
        bank.render(TemplateId::new(kind, rng.random_range(1..=n)), PLACEHOLDER)
    };
    for (i, id) in identities.iter().enumerate() {
        for q in &id.query_image_ids {
            let (question, answer) = render(&mut rng, TemplateKind::RecognitionPositive)?;
            qa_pairs.push(TrainingSample {
                identity_id: id.identity_id.clone(),
                reference_image_id: id.reference_image_id.clone(),
                query_image_id: Some(q.clone()),
                question,
                answer,
                kind: TaskKind::Recognition,
                polarity: Polarity::Positive,
            });
            let j = loop {
                let j = rng.random_range(0..identities.len());
                if j != i {
                    break j;
                }
            };
            let other = identities[j].query_image_ids.choose(&mut rng).expect("kept set non-empty");
            let (question, answer) = render(&mut rng, TemplateKind::RecognitionNegative)?;
            qa_pairs.push(TrainingSample {
                identity_id: id.identity_id.clone(),
                reference_image_id: id.reference_image_id.clone(),
                query_image_id: Some(other.clone()),
                question,
                answer,
                kind: TaskKind::Recognition,
                polarity: Polarity::Negative,
            });
        }
        for a in &id.attributes {
            qa_pairs.push(TrainingSample {
                identity_id: id.identity_id.clone(),
                reference_image_id: id.reference_image_id.clone(),
                query_image_id: None,
                question: a.question.clone(),
                answer: a.answer.clone(),
                kind: TaskKind::Attribute,
                polarity: Polarity::NotApplicable,
            });
        }
    }
    Ok(DatasetManifest {
        header,
        identities,
        images,
        candidates,
        qa_pairs,
        stats,
    })
}

/// `images/<id>.png` with `/` flattened.
pub fn image_path(image_id: &str) -> PathBuf {
    PathBuf::from("images").join(format!("{}.png", image_id.replace('/', "__")))
}

impl DatasetManifest {
    /// Checks conservation, referential integrity and the keep law.
    pub fn validate(&self) -> Result<()> {
        let s = &self.stats;
        let bad = |m: String| Err(PlvmError::Manifest(m));
        if s.generated != s.kept + s.rejected + s.failed || s.generated != self.candidates.len() {
            return bad(format!("candidate counts do not add up: {s:?}"));
        }
        let kept: HashSet<&str> = self
            .candidates
            .iter()
            .filter(|c| c.kept)
            .map(|c| c.candidate_id.as_str())
            .collect();
        for c in &self.candidates {
            let law = match (c.clip_similarity, c.face_similarity) {
                (Some(a), Some(b)) => self.header.thresholds.keeps(a, b),
                _ => false,
            };
            if law != c.kept {
                return bad(format!("kept flag of {} disagrees with its scores", c.candidate_id));
            }
        }
        let images: HashMap<&str, &ManifestImage> = self.images.iter().map(|i| (i.image_id.as_str(), i)).collect();
        for i in &self.images {
            if i.role == ImageRole::Query && !i.candidate_id.as_deref().is_some_and(|c| kept.contains(c)) {
                return bad(format!("query image {} does not trace to a kept candidate", i.image_id));
            }
        }
        let owner = |id: &str| images.get(id).map(|i| i.identity_id.as_str());
        for q in &self.qa_pairs {
            if owner(&q.reference_image_id).is_none() {
                return bad(format!("qa pair names unknown reference `{}`", q.reference_image_id));
            }
            if let Some(qi) = &q.query_image_id {
                let Some(o) = owner(qi) else {
                    return bad(format!("qa pair names unknown query `{qi}`"));
                };
                let same = o == q.identity_id;
                if same != (q.polarity == Polarity::Positive) {
                    return bad(format!("recognition pair polarity disagrees with identities for `{qi}`"));
                }
            }
        }
        Ok(())
    }

    /// The sampler's view: identities with their query pools and attributes.
    pub fn to_dataset(&self) -> Dataset {
        Dataset {
            identities: self
                .identities
                .iter()
                .map(|i| IdentityPool {
                    identity_id: i.identity_id.clone(),
                    reference_image_id: i.reference_image_id.clone(),
                    query_image_ids: i.query_image_ids.clone(),
                    attributes: i.attributes.clone(),
                })
                .collect(),
        }
    }

    pub fn image(&self, id: &str) -> Option<&ManifestImage> {
        self.images.iter().find(|i| i.image_id == id)
    }

    pub fn to_jsonl(&self) -> Result<String> {
        let mut records = vec![Record::Header(self.header.clone())];
        records.extend(self.identities.iter().cloned().map(Record::Identity));
        records.extend(self.images.iter().cloned().map(Record::Image));
        records.extend(self.candidates.iter().cloned().map(Record::Candidate));
        records.extend(self.qa_pairs.iter().cloned().map(Record::Qa));
        records.push(Record::Stats(self.stats));
        let mut s = String::new();
        for r in records {
            s.push_str(&serde_json::to_string(&r)?);
            s.push('\n');
        }
        Ok(s)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_jsonl()?).map_err(|e| PlvmError::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let f = std::fs::File::open(path).map_err(|e| PlvmError::io(path, e))?;
        let mut header = None;
        let mut m = DatasetManifest {
            header: ManifestHeader {
                version: String::new(),
                seed: 0,
                thresholds: Thresholds::default(),
                per_ref: 0,
                generator: String::new(),
            },
            identities: Vec::new(),
            images: Vec::new(),
            candidates: Vec::new(),
            qa_pairs: Vec::new(),
            stats: ManifestStats::default(),
        };
        for (n, line) in BufReader::new(f).lines().enumerate() {
            let line = line.map_err(|e| PlvmError::io(path, e))?;
            if line.trim().is_empty() {
                continue;
            }
            let r: Record = serde_json::from_str(&line)
                .map_err(|e| PlvmError::Manifest(format!("{}:{}: {e}", path.display(), n + 1)))?;
            match r {
                Record::Header(h) => header = Some(h),
                Record::Identity(i) => m.identities.push(i),
                Record::Image(i) => m.images.push(i),
                Record::Candidate(c) => m.candidates.push(c),
                Record::Qa(q) => m.qa_pairs.push(q),
                Record::Stats(s) => m.stats = s,
            }
        }
        m.header = header.ok_or_else(|| PlvmError::Manifest("manifest has no header record".into()))?;
        if m.header.version != DATA_VERSION {
            return Err(PlvmError::Manifest(format!("unsupported data manifest version `{}`", m.header.version)));
        }
        m.validate()?;
        Ok(m)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PipelineConfig {
    pub per_ref: usize,
    pub thresholds: Thresholds,
    pub seed: u64,
    pub prompt_count: usize,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        Self {
            per_ref: 5,
            thresholds: Thresholds::default(),
            seed: 0,
            prompt_count: 200,
        }
    }
}

/// The plug-in models of a pipeline run.
pub struct Plugins<'a> {
    pub grammar: &'a PromptGrammar,
    pub generator: &'a dyn ImageGenerator,
    pub clip: &'a dyn ClipScorer,
    pub face: &'a dyn FaceScorer,
    pub answerer: &'a dyn AttributeAnswerer,
}

/// Runs the pipeline end to end. With `out_dir`, kept images and references
/// are written under `out_dir/images/`.
pub fn run_pipeline(
    references: &[Reference],
    config: &PipelineConfig,
    plugins: &Plugins<'_>,
    out_dir: Option<&Path>,
) -> Result<(DatasetManifest, HashMap<String, Image>)> {
    let prompts = plugins.grammar.generate(config.prompt_count, config.seed)?;
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut candidates = Vec::new();
    for r in references {
        candidates.extend(synthesize(r, &prompts, plugins.generator, config.per_ref, &mut rng)?);
    }
    let ref_images: HashMap<String, Image> = references.iter().map(|r| (r.image_id(), r.image.clone())).collect();
    score_and_filter(&mut candidates, &ref_images, plugins.clip, plugins.face, config.thresholds);
    let mut images = ref_images;
    for c in &candidates {
        if let (true, Some(img)) = (c.kept, &c.generated_image) {
            images.insert(c.candidate_id.clone(), img.clone());
        }
    }
    let header = ManifestHeader {
        version: DATA_VERSION.into(),
        seed: config.seed,
        thresholds: config.thresholds,
        per_ref: config.per_ref,
        generator: plugins.generator.name().to_string(),
    };
    let manifest = build_manifest(header, references, candidates, TemplateBank::standard(), plugins.answerer)?;
    if let Some(dir) = out_dir {
        std::fs::create_dir_all(dir.join("images")).map_err(|e| PlvmError::io(dir, e))?;
        for i in &manifest.images {
            images[&i.image_id].save_png(&dir.join(&i.path))?;
        }
    }
    Ok((manifest, images))
}

#[cfg(test)]
mod tests {
    use super::*;

    struct Fixed(f64);

    impl ClipScorer for Fixed {
        fn score(&self, _: &Image, _: &str) -> Result<f64> {
            Ok(self.0)
        }
    }

    impl FaceScorer for Fixed {
        fn score(&self, _: &Image, _: &Image) -> Result<f64> {
            Ok(self.0)
        }
    }

    fn candidate(id: &str) -> SynthesisCandidate {
        SynthesisCandidate {
            candidate_id: id.into(),
            identity_id: "a".into(),
            reference_image_id: "a/ref".into(),
            prompt: "p".into(),
            generated_image: Some(Image::filled(id, 2, 2, [0; 3]).unwrap()),
            clip_similarity: None,
            face_similarity: None,
            kept: false,
            status: CandidateStatus::Pending,
            reason: None,
        }
    }

    fn filter_one(clip: f64, face: f64) -> bool {
        let mut c = vec![candidate("a/q0")];
        let refs = HashMap::from([("a/ref".to_string(), Image::filled("r", 2, 2, [0; 3]).unwrap())]);
        !score_and_filter(&mut c, &refs, &Fixed(clip), &Fixed(face), Thresholds::default()).is_empty()
    }

    #[test]
    fn threshold_examples() {
        assert!(!filter_one(0.15, 0.9));
        assert!(filter_one(0.2, 0.5));
        assert!(!filter_one(0.9, 0.45));
    }

    #[test]
    fn score_errors_reject() {
        struct Broken;
        impl ClipScorer for Broken {
            fn score(&self, _: &Image, _: &str) -> Result<f64> {
                Err(PlvmError::InvalidConfig("down".into()))
            }
        }
        let mut c = vec![candidate("a/q0")];
        let refs = HashMap::from([("a/ref".to_string(), Image::filled("r", 2, 2, [0; 3]).unwrap())]);
        assert!(score_and_filter(&mut c, &refs, &Broken, &Fixed(1.0), Thresholds::default()).is_empty());
        assert_eq!(c[0].reason.as_deref(), Some("score_error"));
        assert_eq!(c[0].status, CandidateStatus::Rejected);
    }

    fn toy_references(n: usize) -> (Vec<Reference>, GroundTruthAnswerer) {
        let attrs = IdentityAttributes::distinct(n, 11);
        let mut answerer = GroundTruthAnswerer::default();
        let refs = attrs
            .into_iter()
            .enumerate()
            .map(|(i, a)| {
                let id = format!("id{i}");
                let r = Reference {
                    identity_id: id.clone(),
                    image: a.reference(&id),
                };
                answerer.identities.insert(id, a);
                r
            })
            .collect();
        (refs, answerer)
    }

    fn run(n: usize, per_ref: usize, seed: u64, out: Option<&Path>) -> DatasetManifest {
        let (refs, answerer) = toy_references(n);
        let grammar = PromptGrammar::default();
        let generator = ProceduralGenerator::default();
        let clip = ColorClipScorer::default();
        let plugins = Plugins {
            grammar: &grammar,
            generator: &generator,
            clip: &clip,
            face: &PixelFaceScorer,
            answerer: &answerer,
        };
        let cfg = PipelineConfig {
            per_ref,
            seed,
            ..Default::default()
        };
        run_pipeline(&refs, &cfg, &plugins, out).unwrap().0
    }

    #[test]
    fn counts_and_integrity() {
        let m = run(3, 5, 1, None);
        assert_eq!(m.candidates.len(), 15);
        let s = m.stats;
        assert_eq!(s.generated, s.kept + s.rejected + s.failed);
        m.validate().unwrap();
        for q in &m.qa_pairs {
            assert_eq!(q.query_image_id.is_none(), q.kind == TaskKind::Attribute);
        }
        let attr = m.qa_pairs.iter().filter(|q| q.kind == TaskKind::Attribute).count();
        assert_eq!(attr, 7 * m.identities.len());
    }

    #[test]
    fn deterministic_under_seed() {
        assert_eq!(run(3, 5, 7, None).to_jsonl().unwrap(), run(3, 5, 7, None).to_jsonl().unwrap());
    }

    #[test]
    fn manifest_round_trips_through_disk() {
        let dir = tempfile::tempdir().unwrap();
        let m = run(2, 4, 3, Some(dir.path()));
        let path = dir.path().join("manifest.jsonl");
        m.save(&path).unwrap();
        let first = std::fs::read_to_string(&path).unwrap();
        assert!(first.starts_with(r#"{"record":"header","version":"plvm-data-v1","seed":3,"thresholds":{"clip_min":0.2,"face_min":0.5}"#));
        let back = DatasetManifest::load(&path).unwrap();
        assert_eq!(back.to_jsonl().unwrap(), first);
        for i in &back.images {
            assert!(dir.path().join(&i.path).exists());
        }
        assert_eq!(back.to_dataset().identities.len(), back.identities.len());
    }

    #[test]
    fn two_identities_one_query_each() {
        let (refs, answerer) = toy_references(2);
        let mk = |r: &Reference| SynthesisCandidate {
            identity_id: r.identity_id.clone(),
            reference_image_id: r.image_id(),
            kept: true,
            status: CandidateStatus::Kept,
            clip_similarity: Some(1.0),
            face_similarity: Some(1.0),
            ..candidate(&format!("{}/q0", r.identity_id))
        };
        let header = ManifestHeader {
            version: DATA_VERSION.into(),
            seed: 0,
            thresholds: Thresholds::default(),
            per_ref: 1,
            generator: "fixed".into(),
        };
        let m = build_manifest(header, &refs, refs.iter().map(mk).collect(), TemplateBank::standard(), &answerer).unwrap();
        let pos = m.qa_pairs.iter().filter(|q| q.polarity == Polarity::Positive).count();
        let neg = m.qa_pairs.iter().filter(|q| q.polarity == Polarity::Negative).count();
        assert_eq!((pos, neg), (2, 2));
        m.validate().unwrap();
        assert!(build_manifest(m.header.clone(), &refs[..1], vec![], TemplateBank::standard(), &answerer).is_err());
    }
}
