//! Stage 1: spatially diverse frame sampling and open-vocabulary category
//! discovery through a pluggable label provider.
//!
//! Frames are sampled by greedy farthest-point sampling over camera centers
//! (translation only — rotation diversity is ignored). The sampled frames are
//! then shown to a [`LabelProvider`] one at a time together with the running
//! [`CategoryRegistry`]; returned labels are normalized, resolved through a
//! user-supplied synonym table, and appended only when their canonical form is
//! new. Provider calls are sequential by contract: each call may depend on the
//! registry produced by the previous one.

use std::collections::{BTreeSet, HashMap, HashSet};
use std::fs;
use std::path::Path;

use crate::bundle::{split_token, Frame, SceneBundle};
use crate::geom::Vec3;
use crate::{Error, FrameId, Result};

/// Trims, lowercases, and collapses runs of whitespace to single spaces.
pub fn normalize_label(raw: &str) -> String {
    raw.split_whitespace().map(str::to_lowercase).collect::<Vec<_>>().join(" ")
}

/// Ordered list of canonical category strings plus the synonym table used to
/// fold aliases into them.
#[derive(Debug, Clone, Default)]
pub struct CategoryRegistry {
    entries: Vec<String>,
    /// normalized alias -> normalized canonical; values are never keys.
    synonyms: HashMap<String, String>,
}

impl CategoryRegistry {
    pub fn new() -> Self {
        Self::default()
    }

    /// Builds an empty registry with an alias → canonical synonym table.
    ///
    /// Both sides are normalized. Rejected as configuration errors: empty
    /// strings, an alias equal to its canonical form, one alias mapped to two
    /// different canonicals, and chains (a canonical that is itself an alias).
    pub fn with_synonyms<'a, I>(pairs: I) -> Result<Self>
    where
        I: IntoIterator<Item = (&'a str, &'a str)>,
    {
        let mut synonyms = HashMap::new();
        for (alias, canonical) in pairs {
            let a = normalize_label(alias);
            let c = normalize_label(canonical);
            if a.is_empty() || c.is_empty() {
                return Err(Error::Config(format!(
                    "synonym pair '{alias}' -> '{canonical}' has an empty side"
                )));
            }
            if a == c {
                return Err(Error::Config(format!("synonym alias '{a}' maps to itself")));
            }
            if let Some(prev) = synonyms.get(&a) {
                if *prev != c {
                    return Err(Error::Config(format!(
                        "alias '{a}' maps to both '{prev}' and '{c}'"
                    )));
                }
            }
            synonyms.insert(a, c);
        }
        for canonical in synonyms.values() {
            if synonyms.contains_key(canonical) {
                return Err(Error::Config(format!(
                    "synonym chains are not supported: '{canonical}' is both alias and canonical"
                )));
            }
        }
        Ok(Self { entries: Vec::new(), synonyms })
    }

    /// Normalized canonical form of a raw label.
    pub fn canonical_of(&self, raw: &str) -> String {
        let n = normalize_label(raw);
        self.synonyms.get(&n).cloned().unwrap_or(n)
    }

    /// Registers a label. Returns true when its canonical form was new.
    /// Labels that normalize to the empty string are ignored.
    pub fn register(&mut self, raw: &str) -> bool {
        let canonical = self.canonical_of(raw);
        if canonical.is_empty() || self.entries.contains(&canonical) {
            return false;
        }
        self.entries.push(canonical);
        true
    }

    pub fn contains(&self, raw: &str) -> bool {
        self.entries.contains(&self.canonical_of(raw))
    }

    /// Canonical entries in discovery order.
    pub fn entries(&self) -> &[String] {
        &self.entries
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }
}

/// Source of per-frame category labels (in production, a vision-language
/// model; in tests, a transcript replay or a ground-truth oracle).
pub trait LabelProvider {
    /// Provider name used in diagnostics.
    fn name(&self) -> &'static str;

    /// Labels for objects visible in `frame` that the provider considers
    /// novel relative to `registry`. Strings must be nonempty after trimming.
    fn labels_for_frame(&self, frame: &Frame, registry: &CategoryRegistry) -> Result<Vec<String>>;
}

/// Greedy farthest-point sampling over camera centers.
///
/// Seeded at the first frame; each step adds the frame maximizing the minimum
/// distance to already-selected centers, breaking ties toward the lower frame
/// id. Returns `min(k, #frames)` ids in selection order.
pub fn sample_frames(bundle: &SceneBundle, k: usize) -> Result<Vec<FrameId>> {
    if bundle.frames.is_empty() {
        return Err(Error::Config("cannot sample frames from an empty bundle".into()));
    }
    if k == 0 {
        return Err(Error::Config("frame sample size must be at least 1".into()));
    }
    let centers: Vec<Vec3> = bundle.frames.iter().map(|f| f.camera.center()).collect();
    let n = centers.len();
    let take = k.min(n);

    let mut selected = Vec::with_capacity(take);
    let mut taken = vec![false; n];
    let mut min_d2 = vec![f64::INFINITY; n];
    let mut last = 0usize;
    selected.push(bundle.frames[0].id);
    taken[0] = true;

    while selected.len() < take {
        let mut best: Option<usize> = None;
        for i in 0..n {
            if taken[i] {
                continue;
            }
            let d2 = (centers[i] - centers[last]).norm_squared();
            if d2 < min_d2[i] {
                min_d2[i] = d2;
            }
            // Strict > keeps the lowest index on ties; frames are sorted by id.
            match best {
                None => best = Some(i),
                Some(b) if min_d2[i] > min_d2[b] => best = Some(i),
                _ => {}
            }
        }
        let b = best.expect("loop runs only while unselected frames remain");
        taken[b] = true;
        last = b;
        selected.push(bundle.frames[b].id);
    }
    Ok(selected)
}

/// Raw labels one provider call returned for one sampled frame.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct FrameEmissions {
    pub frame: FrameId,
    pub labels: Vec<String>,
}

/// Result of a discovery run: the registry plus the raw emission stream the
/// redundancy metrics are computed from.
#[derive(Debug, Clone)]
pub struct DiscoveryOutcome {
    pub registry: CategoryRegistry,
    /// Per successfully-queried frame, in sample order.
    pub emissions: Vec<FrameEmissions>,
    pub warnings: Vec<String>,
}

/// Runs the discovery loop over `k` farthest-point-sampled frames.
///
/// `registry` seeds the run (normally empty entries plus a synonym table).
/// A provider failure on one frame is recorded as a warning and the frame is
/// skipped; if every sampled frame fails the run is an error.
pub fn discover_categories(
    bundle: &SceneBundle,
    provider: &dyn LabelProvider,
    k: usize,
    registry: CategoryRegistry,
) -> Result<DiscoveryOutcome> {
    let order = sample_frames(bundle, k)?;
    let mut registry = registry;
    let mut emissions = Vec::new();
    let mut warnings = Vec::new();
    let mut failures = 0usize;

    for &fid in &order {
        let frame = bundle.frame(fid).expect("sampled ids come from the bundle");
        match provider.labels_for_frame(frame, &registry) {
            Ok(labels) => {
                let mut kept = Vec::with_capacity(labels.len());
                for raw in labels {
                    if raw.trim().is_empty() {
                        warnings.push(format!("frame {fid}: provider returned an empty label"));
                        continue;
                    }
                    registry.register(&raw);
                    kept.push(raw);
                }
                emissions.push(FrameEmissions { frame: fid, labels: kept });
            }
            Err(e) => {
                failures += 1;
                let w = format!("frame {fid}: {e}");
                log::warn!("discovery skipped {w}");
                warnings.push(w);
            }
        }
    }

    if failures == order.len() {
        return Err(Error::Provider {
            provider: provider.name(),
            detail: format!("all {failures} sampled frames failed"),
        });
    }
    Ok(DiscoveryOutcome { registry, emissions, warnings })
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RegistryMetrics {
    /// Fraction of ground-truth categories present in the registry, matched
    /// after canonicalization.
    pub rec: f64,
    /// Semantic redundancy rate: fraction of raw emitted labels whose
    /// canonical form already appeared earlier in the emission stream.
    pub srr: f64,
    /// Discovery gain ratio: registry size divided by the mean number of
    /// labels returned per successfully queried frame. Zero when nothing was
    /// emitted.
    pub dgr: f64,
}

/// Scores a discovery run against ground-truth category names.
pub fn registry_metrics(
    registry: &CategoryRegistry,
    ground_truth: &[String],
    emissions: &[FrameEmissions],
) -> Result<RegistryMetrics> {
    if ground_truth.is_empty() {
        return Err(Error::EmptyGroundTruth);
    }
    let gt: BTreeSet<String> = ground_truth.iter().map(|g| registry.canonical_of(g)).collect();
    let hits = registry.entries.iter().filter(|e| gt.contains(*e)).count();
    let rec = hits as f64 / gt.len() as f64;

    let mut seen = HashSet::new();
    let mut total = 0usize;
    let mut duplicates = 0usize;
    for fe in emissions {
        for raw in &fe.labels {
            total += 1;
            if !seen.insert(registry.canonical_of(raw)) {
                duplicates += 1;
            }
        }
    }
    let srr = if total == 0 { 0.0 } else { duplicates as f64 / total as f64 };
    let dgr = if total == 0 {
        0.0
    } else {
        let mean_per_frame = total as f64 / emissions.len() as f64;
        registry.entries.len() as f64 / mean_per_frame
    };
    Ok(RegistryMetrics { rec, srr, dgr })
}

/// Replays labels from a transcript: one `<frame_id> <label>` line per label,
/// where the label runs to the end of the line. Blank lines and lines starting
/// with `#` are skipped. Frames absent from the transcript yield no labels.
#[derive(Debug, Clone, Default)]
pub struct TranscriptLabelProvider {
    by_frame: HashMap<FrameId, Vec<String>>,
}

impl TranscriptLabelProvider {
    pub fn new(entries: impl IntoIterator<Item = (FrameId, Vec<String>)>) -> Self {
        let mut by_frame: HashMap<FrameId, Vec<String>> = HashMap::new();
        for (frame, labels) in entries {
            by_frame.entry(frame).or_default().extend(labels);
        }
        Self { by_frame }
    }

    pub fn from_file(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path)
            .map_err(|e| Error::io(format!("reading {}", path.display()), e))?;
        let mut by_frame: HashMap<FrameId, Vec<String>> = HashMap::new();
        for (no, raw) in text.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (id_tok, label) = split_token(line);
            let id: FrameId = id_tok
                .parse()
                .map_err(|_| Error::parse(path, no + 1, format!("bad frame id '{id_tok}'")))?;
            if label.is_empty() {
                return Err(Error::parse(path, no + 1, "transcript line needs a label"));
            }
            by_frame.entry(id).or_default().push(label.to_string());
        }
        Ok(Self { by_frame })
    }
}

impl LabelProvider for TranscriptLabelProvider {
    fn name(&self) -> &'static str {
        "transcript"
    }

    fn labels_for_frame(&self, frame: &Frame, _registry: &CategoryRegistry) -> Result<Vec<String>> {
        Ok(self.by_frame.get(&frame.id).cloned().unwrap_or_default())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geom::{CameraModel, DepthMap, Mat3};
    use proptest::prelude::*;

    fn bundle_with_centers(centers: &[Vec3]) -> SceneBundle {
        let frames = centers
            .iter()
            .enumerate()
            .map(|(i, c)| Frame {
                id: i as FrameId,
                camera: CameraModel {
                    fx: 10.0,
                    fy: 10.0,
                    cx: 1.5,
                    cy: 1.5,
                    rotation: Mat3::identity(),
                    // With R = I the center is -t.
                    translation: -c,
                    width: 4,
                    height: 4,
                },
                depth: DepthMap::new(4, 4),
                masks: vec![],
                image: None,
            })
            .collect();
        SceneBundle { gravity: Vec3::new(0.0, 0.0, -1.0), frames }
    }

    fn line_bundle(n: usize) -> SceneBundle {
        let centers: Vec<Vec3> = (0..n).map(|x| Vec3::new(x as f64, 0.0, 0.0)).collect();
        bundle_with_centers(&centers)
    }

    #[test]
    fn farthest_point_walk_on_a_line() {
        // From x = 0: the far end, then the midpoint; 4 and 5 tie and the
        // lower frame id wins.
        let got = sample_frames(&line_bundle(10), 3).unwrap();
        assert_eq!(got, vec![0, 9, 4]);
    }

    #[test]
    fn oversized_k_returns_every_frame_in_selection_order() {
        let got = sample_frames(&line_bundle(5), 20).unwrap();
        assert_eq!(got.len(), 5);
        assert_eq!(got, vec![0, 4, 2, 1, 3]);
    }

    #[test]
    fn k_of_one_returns_the_seed_frame() {
        let got = sample_frames(&line_bundle(7), 1).unwrap();
        assert_eq!(got, vec![0]);
    }

    #[test]
    fn sampling_rejects_empty_bundle_and_zero_k() {
        let empty = SceneBundle { gravity: Vec3::new(0.0, 0.0, -1.0), frames: vec![] };
        assert!(sample_frames(&empty, 3).is_err());
        assert!(sample_frames(&line_bundle(3), 0).is_err());
    }

    proptest! {
        #[test]
        fn sampling_is_deterministic_subset_without_repeats(
            xs in proptest::collection::vec((-100.0f64..100.0, -100.0f64..100.0, -100.0f64..100.0), 1..40),
            k in 1usize..50,
        ) {
            let centers: Vec<Vec3> = xs.iter().map(|&(x, y, z)| Vec3::new(x, y, z)).collect();
            let bundle = bundle_with_centers(&centers);
            let a = sample_frames(&bundle, k).unwrap();
            let b = sample_frames(&bundle, k).unwrap();
            prop_assert_eq!(&a, &b);
            prop_assert_eq!(a.len(), k.min(centers.len()));
            let unique: HashSet<_> = a.iter().collect();
            prop_assert_eq!(unique.len(), a.len());
            for id in &a {
                prop_assert!((*id as usize) < centers.len());
            }
        }
    }

    #[test]
    fn synonym_folds_second_emission_into_first() {
        let bundle = line_bundle(2);
        let provider = TranscriptLabelProvider::new([
            (0, vec!["sofa".to_string()]),
            (1, vec!["couch".to_string()]),
        ]);
        let registry = CategoryRegistry::with_synonyms([("couch", "sofa")]).unwrap();
        let out = discover_categories(&bundle, &provider, 2, registry).unwrap();
        assert_eq!(out.registry.entries(), ["sofa"]);
        assert!(out.registry.contains("Couch"));
    }

    #[test]
    fn silent_provider_yields_empty_registry() {
        let bundle = line_bundle(3);
        let provider = TranscriptLabelProvider::default();
        let out = discover_categories(&bundle, &provider, 3, CategoryRegistry::new()).unwrap();
        assert!(out.registry.is_empty());
        assert_eq!(out.emissions.len(), 3);
    }

    struct FailingProvider {
        fail_frames: HashSet<FrameId>,
        labels: HashMap<FrameId, Vec<String>>,
    }

    impl LabelProvider for FailingProvider {
        fn name(&self) -> &'static str {
            "failing"
        }
        fn labels_for_frame(
            &self,
            frame: &Frame,
            _registry: &CategoryRegistry,
        ) -> Result<Vec<String>> {
            if self.fail_frames.contains(&frame.id) {
                return Err(Error::Provider { provider: "failing", detail: "down".into() });
            }
            Ok(self.labels.get(&frame.id).cloned().unwrap_or_default())
        }
    }

    #[test]
    fn failed_frames_are_skipped_with_warnings() {
        let bundle = line_bundle(3);
        let provider = FailingProvider {
            fail_frames: [1].into(),
            labels: [(0, vec!["desk".to_string()]), (2, vec!["lamp".to_string()])].into(),
        };
        let out = discover_categories(&bundle, &provider, 3, CategoryRegistry::new()).unwrap();
        assert_eq!(out.registry.entries(), ["desk", "lamp"]);
        assert_eq!(out.warnings.len(), 1);
        assert_eq!(out.emissions.len(), 2);
    }

    #[test]
    fn discovery_fails_when_every_frame_fails() {
        let bundle = line_bundle(2);
        let provider =
            FailingProvider { fail_frames: [0, 1].into(), labels: HashMap::new() };
        let err = discover_categories(&bundle, &provider, 2, CategoryRegistry::new()).unwrap_err();
        assert!(matches!(err, Error::Provider { .. }), "{err}");
    }

    #[test]
    fn replaying_a_transcript_is_idempotent() {
        let bundle = line_bundle(4);
        let provider = TranscriptLabelProvider::new([
            (0, vec!["Dining  Table".to_string(), "chair".to_string()]),
            (2, vec!["dining table".to_string(), "TV stand".to_string()]),
        ]);
        let a = discover_categories(&bundle, &provider, 4, CategoryRegistry::new()).unwrap();
        let b = discover_categories(&bundle, &provider, 4, CategoryRegistry::new()).unwrap();
        assert_eq!(a.registry.entries(), b.registry.entries());
        assert_eq!(a.registry.entries(), ["dining table", "chair", "tv stand"]);
    }

    #[test]
    fn registry_never_exceeds_distinct_canonical_emissions() {
        let bundle = line_bundle(3);
        let provider = TranscriptLabelProvider::new([
            (0, vec!["a".to_string(), "b".to_string(), "A ".to_string()]),
            (1, vec!["b".to_string()]),
            (2, vec!["c".to_string()]),
        ]);
        let out = discover_categories(&bundle, &provider, 3, CategoryRegistry::new()).unwrap();
        let distinct: HashSet<String> = out
            .emissions
            .iter()
            .flat_map(|fe| fe.labels.iter().map(|l| out.registry.canonical_of(l)))
            .collect();
        assert!(out.registry.len() <= distinct.len());
        assert_eq!(out.registry.entries(), ["a", "b", "c"]);
    }

    #[test]
    fn normalization_lowercases_and_collapses_whitespace() {
        assert_eq!(normalize_label("  Sofa \t Bed  "), "sofa bed");
        assert_eq!(normalize_label(""), "");
        assert_eq!(normalize_label(" \t "), "");
    }

    #[test]
    fn synonym_table_rejects_chains_self_maps_and_conflicts() {
        assert!(CategoryRegistry::with_synonyms([("couch", "sofa")]).is_ok());
        assert!(CategoryRegistry::with_synonyms([("sofa", "Sofa")]).is_err());
        assert!(CategoryRegistry::with_synonyms([("a", "b"), ("b", "c")]).is_err());
        assert!(CategoryRegistry::with_synonyms([("a", "b"), ("a", "c")]).is_err());
        assert!(CategoryRegistry::with_synonyms([("", "b")]).is_err());
    }

    #[test]
    fn metrics_on_perfect_registry() {
        let mut registry = CategoryRegistry::new();
        registry.register("sofa");
        registry.register("desk");
        let gt = vec!["sofa".to_string(), "desk".to_string()];
        let emissions = vec![
            FrameEmissions { frame: 0, labels: vec!["sofa".into()] },
            FrameEmissions { frame: 5, labels: vec!["desk".into()] },
        ];
        let m = registry_metrics(&registry, &gt, &emissions).unwrap();
        assert_eq!(m.rec, 1.0);
        assert_eq!(m.srr, 0.0);
        assert_eq!(m.dgr, 2.0); // 2 entries / (2 labels over 2 frames)
    }

    #[test]
    fn redundant_synonym_emission_counts_toward_srr() {
        let registry = CategoryRegistry::with_synonyms([("couch", "sofa")]).unwrap();
        let mut registry = registry;
        for l in ["sofa", "couch", "desk"] {
            registry.register(l);
        }
        let gt = vec!["sofa".to_string(), "desk".to_string()];
        let emissions = vec![FrameEmissions {
            frame: 0,
            labels: vec!["sofa".into(), "couch".into(), "desk".into()],
        }];
        let m = registry_metrics(&registry, &gt, &emissions).unwrap();
        assert_eq!(m.rec, 1.0);
        assert!((m.srr - 1.0 / 3.0).abs() < 1e-12);
    }

    #[test]
    fn metrics_require_ground_truth() {
        let registry = CategoryRegistry::new();
        let err = registry_metrics(&registry, &[], &[]).unwrap_err();
        assert!(matches!(err, Error::EmptyGroundTruth));
    }

    #[test]
    fn partial_recall_counts_canonical_hits_only() {
        let mut registry = CategoryRegistry::with_synonyms([("couch", "sofa")]).unwrap();
        registry.register("couch"); // stored as "sofa"
        registry.register("floor lamp");
        let gt = vec!["Sofa".to_string(), "desk".to_string(), "rug".to_string()];
        let m = registry_metrics(&registry, &gt, &[]).unwrap();
        assert!((m.rec - 1.0 / 3.0).abs() < 1e-12);
        assert_eq!(m.srr, 0.0);
        assert_eq!(m.dgr, 0.0);
    }

    #[test]
    fn transcript_file_parses_and_replays() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("labels.txt");
        fs::write(&path, "# capture A\n0 sofa\n0 floor lamp\n3 desk\n\n").unwrap();
        let provider = TranscriptLabelProvider::from_file(&path).unwrap();
        let bundle = line_bundle(4);
        let out = discover_categories(&bundle, &provider, 4, CategoryRegistry::new()).unwrap();
        assert_eq!(out.registry.entries(), ["sofa", "floor lamp", "desk"]);

        fs::write(&path, "zero sofa\n").unwrap();
        assert!(TranscriptLabelProvider::from_file(&path).is_err());
        fs::write(&path, "0\n").unwrap();
        assert!(TranscriptLabelProvider::from_file(&path).is_err());
    }
}
