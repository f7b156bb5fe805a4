//! Deterministic synthetic packs with planted inter-sample correlation and
//! intra-sample redundancy.
//!
//! Every video is a sequence of moments. A moment is a concept vector plus a
//! per-moment Gaussian offset, repeated for `frames_per_moment` frames with a
//! smaller per-frame jitter. Concepts are random positive mixtures of three
//! atoms drawn from a bank of `num_concepts` atoms, so unrelated concepts can
//! still overlap partially. A moment re-uses a concept already seen in another
//! video with probability `shared_concept_rate`. Moments that carry no query
//! become background filler (drawn from a small corpus-wide pool) with
//! probability `redundant_moment_rate`.
//!
//! Queries live in a different basis: the mean frame of the target moment is
//! rotated by a fixed random orthogonal map, then every word row gets its own
//! noise. The map is stored in each pack under [`super::TEXT_MAP_ID`].

use std::collections::{BTreeMap, BTreeSet};

use ndarray::{Array1, Array2, Axis};
use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use super::{FeaturePack, MomentSpan, PackMeta, PairingEntry, QueryRecord, Split, VideoRecord, TEXT_MAP_ID};
use crate::error::{Error, Result};

const ATOMS_PER_CONCEPT: usize = 3;
const BACKGROUND_CONCEPTS: usize = 4;
const JITTER_RATIO: f64 = 0.5;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SyntheticSpec {
    pub num_concepts: usize,
    pub num_videos: usize,
    pub moments_per_video: usize,
    pub frames_per_moment: usize,
    pub queries_per_video: usize,
    pub noise_scale: f64,
    pub shared_concept_rate: f64,
    pub redundant_moment_rate: f64,
    pub seed: u64,
    /// Dimension of both the frame and the word features.
    pub feature_dim: usize,
    pub words_per_query: usize,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        SyntheticSpec {
            num_concepts: 32,
            num_videos: 200,
            moments_per_video: 4,
            frames_per_moment: 8,
            queries_per_video: 2,
            noise_scale: 0.05,
            shared_concept_rate: 0.3,
            redundant_moment_rate: 0.5,
            seed: 0,
            feature_dim: 64,
            words_per_query: 6,
        }
    }
}

impl SyntheticSpec {
    pub fn validate(&self) -> Result<()> {
        let fail = |m: &str| Err(Error::Config(format!("synthetic spec: {m}")));
        if self.num_concepts == 0 {
            return fail("num_concepts must be at least 1");
        }
        if self.num_videos == 0 || self.moments_per_video == 0 || self.frames_per_moment == 0 {
            return fail("num_videos, moments_per_video and frames_per_moment must be positive");
        }
        if self.queries_per_video > self.moments_per_video {
            return fail("queries_per_video must not exceed moments_per_video");
        }
        if !(self.noise_scale >= 0.0 && self.noise_scale.is_finite()) {
            return fail("noise_scale must be a finite non-negative number");
        }
        for (name, rate) in [
            ("shared_concept_rate", self.shared_concept_rate),
            ("redundant_moment_rate", self.redundant_moment_rate),
        ] {
            if !(0.0..=1.0).contains(&rate) {
                return fail(&format!("{name} must lie in [0, 1]"));
            }
        }
        if self.feature_dim == 0 || self.words_per_query == 0 {
            return fail("feature_dim and words_per_query must be positive");
        }
        Ok(())
    }
}

/// What a generated moment is made of.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum MomentSource {
    /// Index into the split's concept list.
    Concept(usize),
    /// Index into the corpus-wide background pool.
    Background(usize),
}

/// Generator bookkeeping for one split, used by diagnostics and tests.
#[derive(Debug, Clone)]
pub struct SyntheticTrace {
    /// `moments[v][m]` is the source of moment `m` of video `v`.
    pub moments: Vec<Vec<MomentSource>>,
    /// Concept vectors (video basis) in creation order.
    pub concepts: Vec<Array1<f32>>,
}

impl SyntheticTrace {
    /// Number of distinct videos each concept appears in.
    pub fn concept_video_counts(&self) -> Vec<usize> {
        let mut users: Vec<BTreeSet<usize>> = vec![BTreeSet::new(); self.concepts.len()];
        for (v, moments) in self.moments.iter().enumerate() {
            for m in moments {
                if let MomentSource::Concept(c) = m {
                    users[*c].insert(v);
                }
            }
        }
        users.iter().map(|u| u.len()).collect()
    }
}

#[derive(Debug, Clone)]
pub struct SyntheticPacks {
    pub train: FeaturePack,
    pub val: FeaturePack,
    pub test: FeaturePack,
}

/// Generates train/val/test packs. Pure in `spec` (including the seed).
pub fn generate_synthetic(spec: &SyntheticSpec) -> Result<SyntheticPacks> {
    generate_synthetic_traced(spec).map(|(packs, _)| packs)
}

pub fn generate_synthetic_traced(spec: &SyntheticSpec) -> Result<(SyntheticPacks, [SyntheticTrace; 3])> {
    spec.validate()?;
    let d = spec.feature_dim;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let atoms = gaussian(&mut rng, spec.num_concepts, d, 1.0);
    let mut background = gaussian(&mut rng, BACKGROUND_CONCEPTS, d, 1.0);
    for mut row in background.rows_mut() {
        let norm = row.dot(&row).sqrt();
        row.mapv_inplace(|v| v * (d as f64).sqrt() / norm);
    }
    let text_map = random_orthogonal(&mut rng, d);

    let world = World {
        spec,
        atoms,
        background,
        text_map,
    };
    let (train, t0) = world.split(Split::Train, 1);
    let (val, t1) = world.split(Split::Val, 2);
    let (test, t2) = world.split(Split::Test, 3);
    Ok((SyntheticPacks { train, val, test }, [t0, t1, t2]))
}

struct World<'a> {
    spec: &'a SyntheticSpec,
    atoms: Array2<f64>,
    background: Array2<f64>,
    text_map: Array2<f64>,
}

impl World<'_> {
    fn fresh_concept(&self, rng: &mut ChaCha8Rng) -> Array1<f64> {
        let d = self.spec.feature_dim;
        let k = ATOMS_PER_CONCEPT.min(self.spec.num_concepts);
        let mut v = Array1::zeros(d);
        for atom in sample(rng, self.spec.num_concepts, k).into_iter() {
            let w: f64 = rng.random_range(0.5..1.5);
            v.scaled_add(w, &self.atoms.row(atom));
        }
        let norm = v.dot(&v).sqrt();
        v.mapv(|x| x * (d as f64).sqrt() / norm)
    }

    fn split(&self, split: Split, stream: u64) -> (FeaturePack, SyntheticTrace) {
        let spec = self.spec;
        let d = spec.feature_dim;
        let fpm = spec.frames_per_moment;
        let sigma = spec.noise_scale;
        let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
        rng.set_stream(stream);

        let mut concepts: Vec<Array1<f64>> = Vec::new();
        let mut concept_users: Vec<BTreeSet<usize>> = Vec::new();
        let mut trace_moments = Vec::with_capacity(spec.num_videos);
        let mut videos = Vec::with_capacity(spec.num_videos);
        let mut queries = Vec::new();
        let mut pairing = BTreeMap::new();

        for vi in 0..spec.num_videos {
            let video_id = format!("{split}_v{vi:05}");
            let mut queried: Vec<usize> = sample(&mut rng, spec.moments_per_video, spec.queries_per_video).into_vec();
            queried.sort_unstable();

            let mut frames = Array2::<f64>::zeros((spec.moments_per_video * fpm, d));
            let mut sources = Vec::with_capacity(spec.moments_per_video);
            for m in 0..spec.moments_per_video {
                let is_queried = queried.binary_search(&m).is_ok();
                let (source, base) = if !is_queried && rng.random_bool(spec.redundant_moment_rate) {
                    let b = rng.random_range(0..BACKGROUND_CONCEPTS);
                    (MomentSource::Background(b), self.background.row(b).to_owned())
                } else {
                    let candidates: Vec<usize> = (0..concepts.len())
                        .filter(|&c| !concept_users[c].contains(&vi))
                        .collect();
                    let reuse = rng.random_bool(spec.shared_concept_rate);
                    let c = if reuse && !candidates.is_empty() {
                        candidates[rng.random_range(0..candidates.len())]
                    } else {
                        concepts.push(self.fresh_concept(&mut rng));
                        concept_users.push(BTreeSet::new());
                        concepts.len() - 1
                    };
                    concept_users[c].insert(vi);
                    (MomentSource::Concept(c), concepts[c].clone())
                };
                sources.push(source);
                let offset = &base + &gaussian_vec(&mut rng, d, sigma);
                for f in 0..fpm {
                    let jitter = gaussian_vec(&mut rng, d, sigma * JITTER_RATIO);
                    frames.row_mut(m * fpm + f).assign(&(&offset + &jitter));
                }
            }

            for &m in &queried {
                let qi = queries.len();
                let query_id = format!("{split}_q{qi:05}");
                let start = m * fpm;
                let end = start + fpm;
                let mean = frames
                    .slice(ndarray::s![start..end, ..])
                    .mean_axis(Axis(0))
                    .expect("non-empty segment");
                let text = mean.dot(&self.text_map);
                let mut words = Array2::<f64>::zeros((spec.words_per_query, d));
                for mut row in words.rows_mut() {
                    row.assign(&(&text + &gaussian_vec(&mut rng, d, sigma)));
                }
                pairing.insert(
                    query_id.clone(),
                    PairingEntry {
                        video_id: video_id.clone(),
                        moment_span: Some(MomentSpan { start, end }),
                    },
                );
                queries.push(QueryRecord {
                    query_id,
                    words: words.mapv(|v| v as f32),
                });
            }
            trace_moments.push(sources);
            videos.push(VideoRecord {
                video_id,
                frames: frames.mapv(|v| v as f32),
            });
        }

        let mut extras = BTreeMap::new();
        extras.insert(TEXT_MAP_ID.to_string(), self.text_map.mapv(|v| v as f32));
        let pack = FeaturePack {
            meta: PackMeta {
                feature_dim_video: d,
                feature_dim_text: d,
                split,
            },
            videos,
            queries,
            pairing,
            extras,
        };
        let trace = SyntheticTrace {
            moments: trace_moments,
            concepts: concepts.into_iter().map(|c| c.mapv(|v| v as f32)).collect(),
        };
        (pack, trace)
    }
}

fn gaussian(rng: &mut ChaCha8Rng, rows: usize, cols: usize, scale: f64) -> Array2<f64> {
    Array2::from_shape_fn((rows, cols), |_| scale * rng.sample::<f64, _>(StandardNormal))
}

fn gaussian_vec(rng: &mut ChaCha8Rng, n: usize, scale: f64) -> Array1<f64> {
    if scale == 0.0 {
        return Array1::zeros(n);
    }
    Array1::from_shape_fn(n, |_| scale * rng.sample::<f64, _>(StandardNormal))
}

/// Random orthogonal matrix by Gram-Schmidt on a Gaussian matrix.
fn random_orthogonal(rng: &mut ChaCha8Rng, d: usize) -> Array2<f64> {
    let mut m = gaussian(rng, d, d, 1.0);
    for i in 0..d {
        for j in 0..i {
            let proj = m.row(i).dot(&m.row(j));
            let rj = m.row(j).to_owned();
            m.row_mut(i).scaled_add(-proj, &rj);
        }
        let norm = m.row(i).dot(&m.row(i)).sqrt();
        m.row_mut(i).mapv_inplace(|v| v / norm);
    }
    m
}
