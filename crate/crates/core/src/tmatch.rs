//! Template-matching similarities, the 1-NN template classifier, and the
//! sliding cross-correlation objectness baseline.

use rand::seq::index::sample;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::geometry::{BoundingBox, ObjectnessMap, WindowScorer};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Similarity {
    /// Normalized cross-correlation; higher is more similar, range [-1, 1].
    Cc,
    /// Mean squared pixel difference; lower is more similar.
    Sqd,
}

fn mean(data: &[f32]) -> f64 {
    data.iter().map(|&v| v as f64).sum::<f64>() / data.len() as f64
}

/// Normalized cross-correlation between two equal-size patches, computed in
/// the Pearson form `sum((I - mean_I)(T - mean_T))` over the root of the
/// centered energies. Zero-variance patches are degenerate.
pub fn cc_similarity(template: &Tensor, image: &Tensor) -> Result<f64> {
    if template.shape() != image.shape() {
        return Err(Error::shape_mismatch(template.shape(), image.shape(), "cc_similarity"));
    }
    let tm = mean(template.data());
    let im = mean(image.data());
    let mut num = 0.0f64;
    let mut t_energy = 0.0f64;
    let mut i_energy = 0.0f64;
    for (&t, &i) in template.data().iter().zip(image.data()) {
        let td = t as f64 - tm;
        let id = i as f64 - im;
        num += id * td;
        t_energy += td * td;
        i_energy += id * id;
    }
    if t_energy == 0.0 || i_energy == 0.0 {
        return Err(Error::Degenerate("zero-variance patch in cross-correlation".into()));
    }
    Ok((num / (t_energy * i_energy).sqrt()).clamp(-1.0, 1.0))
}

/// Mean squared difference between two equal-size patches.
pub fn sqd_similarity(template: &Tensor, image: &Tensor) -> Result<f64> {
    if template.shape() != image.shape() {
        return Err(Error::shape_mismatch(template.shape(), image.shape(), "sqd_similarity"));
    }
    let mut acc = 0.0f64;
    for (&t, &i) in template.data().iter().zip(image.data()) {
        let d = i as f64 - t as f64;
        acc += d * d;
    }
    Ok(acc / template.len() as f64)
}

/// Labeled template patches, all of one shape.
#[derive(Debug, Clone)]
pub struct TemplateSet {
    templates: Vec<(Tensor, usize)>,
}

impl TemplateSet {
    pub fn from_templates(templates: Vec<(Tensor, usize)>) -> Result<Self> {
        if templates.is_empty() {
            return Err(Error::Degenerate("empty template set".into()));
        }
        let shape = templates[0].0.shape().to_vec();
        if templates.iter().any(|(t, _)| t.shape() != shape) {
            return Err(Error::Config("templates must share one shape".into()));
        }
        Ok(TemplateSet { templates })
    }

    /// Sample exactly `per_class` templates for every class present in the
    /// pool (without replacement).
    pub fn sample_per_class(
        pool: &[(Tensor, usize)],
        per_class: usize,
        rng: &mut ChaCha8Rng,
    ) -> Result<Self> {
        if per_class == 0 {
            return Err(Error::Config("templates per class must be >= 1".into()));
        }
        let mut by_class: std::collections::BTreeMap<usize, Vec<usize>> = std::collections::BTreeMap::new();
        for (i, (_, label)) in pool.iter().enumerate() {
            by_class.entry(*label).or_default().push(i);
        }
        let mut templates = Vec::new();
        for (label, indices) in &by_class {
            if indices.len() < per_class {
                return Err(Error::Degenerate(format!(
                    "class {label} has {} samples, need {per_class} templates",
                    indices.len()
                )));
            }
            for pick in sample(rng, indices.len(), per_class) {
                let (t, l) = &pool[indices[pick]];
                templates.push((t.clone(), *l));
            }
        }
        Self::from_templates(templates)
    }

    pub fn len(&self) -> usize {
        self.templates.len()
    }

    pub fn is_empty(&self) -> bool {
        self.templates.is_empty()
    }

    pub fn templates(&self) -> &[(Tensor, usize)] {
        &self.templates
    }

    pub fn patches(&self) -> Vec<Tensor> {
        self.templates.iter().map(|(t, _)| t.clone()).collect()
    }
}

/// 1-NN template classifier: the class of the most similar template
/// (maximum CC or minimum SQD). Ties break to the lowest template index;
/// degenerate templates are skipped under CC, and the classification fails
/// only when every template is degenerate.
pub fn tm_classify(patch: &Tensor, set: &TemplateSet, similarity: Similarity) -> Result<usize> {
    let mut best: Option<(f64, usize)> = None;
    let mut skipped = 0usize;
    for (idx, (template, label)) in set.templates.iter().enumerate() {
        let score = match similarity {
            Similarity::Cc => match cc_similarity(template, patch) {
                Ok(s) => s,
                Err(Error::Degenerate(_)) => {
                    skipped += 1;
                    continue;
                }
                Err(e) => return Err(e),
            },
            // lower is better; negate so both cases maximize
            Similarity::Sqd => -sqd_similarity(template, patch)?,
        };
        let better = match best {
            None => true,
            Some((best_score, _)) => score > best_score,
        };
        if better {
            best = Some((score, *label));
        }
        let _ = idx;
    }
    if skipped > 0 {
        log::warn!("tm_classify skipped {skipped} degenerate template(s)");
    }
    match best {
        Some((_, label)) => Ok(label),
        None => Err(Error::Degenerate("all templates degenerate for this patch".into())),
    }
}

/// Template with its mean removed and centered energy precomputed, for the
/// sliding-correlation fast path.
struct CenteredTemplate {
    values: Vec<f64>,
    energy: f64,
    h: usize,
    w: usize,
}

fn center_template(t: &Tensor) -> Result<CenteredTemplate> {
    let (h, w) = match t.shape() {
        [1, h, w] => (*h, *w),
        [h, w] => (*h, *w),
        other => return Err(Error::shape_mismatch(other, &[1, 0, 0], "template")),
    };
    let m = mean(t.data());
    let values: Vec<f64> = t.data().iter().map(|&v| v as f64 - m).collect();
    let energy: f64 = values.iter().map(|v| v * v).sum();
    if energy == 0.0 {
        return Err(Error::Degenerate("zero-variance template".into()));
    }
    Ok(CenteredTemplate { values, energy, h, w })
}

/// CC of one window against a centered template. Since the centered
/// template sums to zero, `sum((I - mean_I) * That) = sum(I * That)`.
fn window_cc(image: &Tensor, x: usize, y: usize, t: &CenteredTemplate) -> f64 {
    let iw = image.shape()[2];
    let n = (t.h * t.w) as f64;
    let mut sum_i = 0.0f64;
    let mut sum_i2 = 0.0f64;
    let mut cross = 0.0f64;
    for ty in 0..t.h {
        let row = (y + ty) * iw + x;
        let img_row = &image.data()[row..row + t.w];
        let t_row = &t.values[ty * t.w..(ty + 1) * t.w];
        for (&iv, &tv) in img_row.iter().zip(t_row) {
            let ivf = iv as f64;
            sum_i += ivf;
            sum_i2 += ivf * ivf;
            cross += ivf * tv;
        }
    }
    let i_energy = sum_i2 - sum_i * sum_i / n;
    if i_energy <= 0.0 {
        return 0.0; // flat window: no correlation
    }
    (cross / (i_energy * t.energy).sqrt()).clamp(-1.0, 1.0)
}

/// Sliding template-matching objectness: per grid position, the maximum CC
/// over the template set with negatives clamped to zero. Map cells are
/// placed at window centers.
pub fn tm_objectness_map(image: &Tensor, templates: &[Tensor], stride: usize) -> Result<ObjectnessMap> {
    if templates.is_empty() {
        return Err(Error::Degenerate("no templates for the objectness baseline".into()));
    }
    if image.rank() != 3 || image.shape()[0] != 1 {
        return Err(Error::shape_mismatch(image.shape(), &[1, 0, 0], "tm objectness input"));
    }
    let centered: Vec<CenteredTemplate> = templates.iter().map(center_template).collect::<Result<_>>()?;
    let (th, tw) = (centered[0].h, centered[0].w);
    if centered.iter().any(|c| c.h != th || c.w != tw) {
        return Err(Error::Config("templates must share one shape".into()));
    }
    let (h, w) = (image.shape()[1], image.shape()[2]);
    if h < th || w < tw {
        return Err(Error::Config(format!(
            "frame {h}x{w} smaller than template {th}x{tw}"
        )));
    }
    let rows = (h - th) / stride + 1;
    let cols = (w - tw) / stride + 1;
    let mut values = vec![0.0f32; rows * cols];
    values
        .par_chunks_mut(cols)
        .enumerate()
        .for_each(|(i, row_out)| {
            let y = i * stride;
            for (j, cell) in row_out.iter_mut().enumerate() {
                let x = j * stride;
                let mut best = 0.0f64;
                for t in &centered {
                    best = best.max(window_cc(image, x, y, t));
                }
                *cell = best as f32;
            }
        });
    ObjectnessMap::new(
        Tensor::new(vec![rows, cols], values)?,
        stride,
        (th as f64 / 2.0, tw as f64 / 2.0),
    )
}

/// Window scorer backed by the template-matching objectness baseline: the
/// requested windows are scored directly (maximum CC over templates,
/// negatives clamped to zero).
pub struct TmScorer {
    centered: Vec<CenteredTemplate>,
}

impl TmScorer {
    pub fn new(templates: &[Tensor]) -> Result<Self> {
        if templates.is_empty() {
            return Err(Error::Degenerate("no templates for the objectness baseline".into()));
        }
        let centered: Vec<CenteredTemplate> = templates.iter().map(center_template).collect::<Result<_>>()?;
        Ok(TmScorer { centered })
    }
}

impl WindowScorer for TmScorer {
    fn score_windows(&self, image: &Tensor, windows: &[BoundingBox]) -> Result<Vec<f32>> {
        windows
            .par_iter()
            .map(|wnd| {
                let mut best = 0.0f64;
                for t in &self.centered {
                    if wnd.w as usize != t.w || wnd.h as usize != t.h {
                        return Err(Error::Config("window size does not match template size".into()));
                    }
                    best = best.max(window_cc(image, wnd.x as usize, wnd.y as usize, t));
                }
                Ok(best as f32)
            })
            .collect()
    }
}
