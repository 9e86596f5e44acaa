//! Geo-tagged example datasets: synthetic generation from class-specific
//! spherical distributions, text-file persistence, stratified few-shot
//! sampling, and seeded minibatching.

use std::fmt::Write as _;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::{Distribution, Normal};

use crate::encoder::{uniform_sphere_sample, GeoLocation};
use crate::error::{Error, Result};
use crate::tensor::Matrix;

/// Supported dataset file format version.
const FORMAT_VERSION: u32 = 1;

/// One location with its frozen image feature vector and optional class label.
#[derive(Debug, Clone, PartialEq)]
pub struct GeoTaggedExample {
    pub location: GeoLocation,
    pub feature: Vec<f64>,
    pub label: Option<usize>,
}

/// An ordered collection of examples with consistent feature width and
/// labeling: either every example is labeled with a class below
/// `num_classes`, or none is and `num_classes` is 0.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    examples: Vec<GeoTaggedExample>,
    feature_dim: usize,
    num_classes: usize,
}

impl Dataset {
    pub fn new(
        examples: Vec<GeoTaggedExample>,
        feature_dim: usize,
        num_classes: usize,
    ) -> Result<Self> {
        for (i, ex) in examples.iter().enumerate() {
            if ex.feature.len() != feature_dim {
                return Err(Error::Shape(format!(
                    "example {i} has feature length {}, dataset dimension is {feature_dim}",
                    ex.feature.len()
                )));
            }
            if ex.feature.iter().any(|v| !v.is_finite()) {
                return Err(Error::NonFinite(format!("feature of example {i}")));
            }
            match (num_classes, ex.label) {
                (0, None) => {}
                (0, Some(_)) => {
                    return Err(Error::Usage(format!(
                        "example {i} is labeled but the dataset declares no classes"
                    )))
                }
                (_, None) => {
                    return Err(Error::Usage(format!(
                        "example {i} is unlabeled in a labeled dataset"
                    )))
                }
                (q, Some(y)) if y >= q => {
                    return Err(Error::Usage(format!(
                        "example {i} has label {y}, num_classes is {q}"
                    )))
                }
                _ => {}
            }
        }
        Ok(Dataset {
            examples,
            feature_dim,
            num_classes,
        })
    }

    pub fn len(&self) -> usize {
        self.examples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.examples.is_empty()
    }

    pub fn feature_dim(&self) -> usize {
        self.feature_dim
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    pub fn is_labeled(&self) -> bool {
        self.num_classes > 0
    }

    pub fn examples(&self) -> &[GeoTaggedExample] {
        &self.examples
    }

    pub fn get(&self, i: usize) -> &GeoTaggedExample {
        &self.examples[i]
    }

    /// New dataset holding clones of the selected examples, in given order.
    pub fn subset(&self, indices: &[usize]) -> Dataset {
        Dataset {
            examples: indices.iter().map(|&i| self.examples[i].clone()).collect(),
            feature_dim: self.feature_dim,
            num_classes: self.num_classes,
        }
    }
}

/// One class of the synthetic generator: a mixture of von Mises-Fisher
/// components on the sphere plus a feature prototype with Gaussian noise.
#[derive(Debug, Clone)]
pub struct ClassSpec {
    pub centers: Vec<GeoLocation>,
    /// Concentration per center; larger is tighter.
    pub kappas: Vec<f64>,
    /// Mixture weight per center; must sum to 1.
    pub weights: Vec<f64>,
    pub prototype: Vec<f64>,
    /// Standard deviation of the isotropic feature noise.
    pub feature_noise: f64,
}

/// Full synthetic data specification: `classes.len()` classes drawn uniformly.
#[derive(Debug, Clone)]
pub struct SyntheticSpec {
    pub feature_dim: usize,
    pub classes: Vec<ClassSpec>,
}

impl SyntheticSpec {
    pub fn validate(&self) -> Result<()> {
        if self.classes.is_empty() {
            return Err(Error::Config("synthetic spec has no classes".into()));
        }
        for (q, class) in self.classes.iter().enumerate() {
            if class.centers.is_empty()
                || class.centers.len() != class.kappas.len()
                || class.centers.len() != class.weights.len()
            {
                return Err(Error::Config(format!(
                    "class {q}: centers/kappas/weights lengths disagree or are empty"
                )));
            }
            if class.kappas.iter().any(|k| !(*k > 0.0) || !k.is_finite()) {
                return Err(Error::Config(format!("class {q}: kappa must be positive")));
            }
            let total: f64 = class.weights.iter().sum();
            if class.weights.iter().any(|w| *w < 0.0) || (total - 1.0).abs() > 1e-9 {
                return Err(Error::Config(format!(
                    "class {q}: mixture weights must be non-negative and sum to 1, got {total}"
                )));
            }
            if class.prototype.len() != self.feature_dim {
                return Err(Error::Config(format!(
                    "class {q}: prototype length {} != feature dim {}",
                    class.prototype.len(),
                    self.feature_dim
                )));
            }
            if !(class.feature_noise >= 0.0) || !class.feature_noise.is_finite() {
                return Err(Error::Config(format!(
                    "class {q}: feature noise must be finite and non-negative"
                )));
            }
        }
        Ok(())
    }

    /// Random specification: one or more uniform sphere centers per class with
    /// a shared concentration, and standard-normal prototypes.
    pub fn random<R: Rng>(
        num_classes: usize,
        centers_per_class: usize,
        kappa: f64,
        feature_dim: usize,
        feature_noise: f64,
        rng: &mut R,
    ) -> Result<Self> {
        if num_classes == 0 || centers_per_class == 0 {
            return Err(Error::Config(
                "synthetic spec needs at least one class and one center".into(),
            ));
        }
        let normal = Normal::new(0.0, 1.0).expect("unit normal");
        let weight = 1.0 / centers_per_class as f64;
        let classes = (0..num_classes)
            .map(|_| {
                let centers = (0..centers_per_class)
                    .map(|_| uniform_sphere_sample(rng))
                    .collect();
                let prototype = (0..feature_dim).map(|_| normal.sample(rng)).collect();
                ClassSpec {
                    centers,
                    kappas: vec![kappa; centers_per_class],
                    weights: vec![weight; centers_per_class],
                    prototype,
                    feature_noise,
                }
            })
            .collect();
        let spec = SyntheticSpec {
            feature_dim,
            classes,
        };
        spec.validate()?;
        Ok(spec)
    }
}

/// Draw from a von Mises-Fisher distribution on the unit sphere with mean
/// direction `center` and concentration `kappa`.
///
/// The cosine w of the angle to the center has density proportional to
/// exp(kappa * w); it is drawn by inverse CDF as
/// w = 1 + ln(1 + (1-u)(e^{-2 kappa} - 1)) / kappa, evaluated with ln_1p and
/// expm1 so both the kappa -> 0 and kappa -> inf limits stay accurate. The
/// azimuth around the center is uniform.
pub fn vmf_sample<R: Rng>(center: &GeoLocation, kappa: f64, rng: &mut R) -> GeoLocation {
    let u = 1.0 - rng.gen::<f64>(); // in (0, 1]
    let psi = 2.0 * std::f64::consts::PI * rng.gen::<f64>();

    let w = (1.0 + ((1.0 - u) * (-2.0 * kappa).exp_m1()).ln_1p() / kappa).clamp(-1.0, 1.0);

    let mu = center.to_unit_vector();
    // Orthonormal tangent basis at mu.
    let helper = if mu[2].abs() < 0.9 {
        [0.0, 0.0, 1.0]
    } else {
        [1.0, 0.0, 0.0]
    };
    let t1 = normalize(cross(helper, mu));
    let t2 = cross(mu, t1);

    let sin_theta = (1.0 - w * w).max(0.0).sqrt();
    let (sin_psi, cos_psi) = psi.sin_cos();
    let point = [
        w * mu[0] + sin_theta * (cos_psi * t1[0] + sin_psi * t2[0]),
        w * mu[1] + sin_theta * (cos_psi * t1[1] + sin_psi * t2[1]),
        w * mu[2] + sin_theta * (cos_psi * t1[2] + sin_psi * t2[2]),
    ];
    GeoLocation::from_unit_vector(point)
}

fn cross(a: [f64; 3], b: [f64; 3]) -> [f64; 3] {
    [
        a[1] * b[2] - a[2] * b[1],
        a[2] * b[0] - a[0] * b[2],
        a[0] * b[1] - a[1] * b[0],
    ]
}

fn normalize(v: [f64; 3]) -> [f64; 3] {
    let n = (v[0] * v[0] + v[1] * v[1] + v[2] * v[2]).sqrt();
    [v[0] / n, v[1] / n, v[2] / n]
}

/// Generate `m` labeled examples: class uniform, location from the class's
/// vMF mixture, feature = prototype + Gaussian noise.
pub fn generate_synthetic<R: Rng>(spec: &SyntheticSpec, m: usize, rng: &mut R) -> Result<Dataset> {
    spec.validate()?;
    if m < 1 {
        return Err(Error::Config("generate_synthetic needs m >= 1".into()));
    }
    let q = spec.classes.len();
    let mut examples = Vec::with_capacity(m);
    for _ in 0..m {
        let label = rng.gen_range(0..q);
        let class = &spec.classes[label];
        let component = pick_weighted(&class.weights, rng);
        let location = vmf_sample(&class.centers[component], class.kappas[component], rng);
        let mut feature = class.prototype.clone();
        if class.feature_noise > 0.0 {
            let noise = Normal::new(0.0, class.feature_noise).expect("validated noise");
            for v in &mut feature {
                *v += noise.sample(rng);
            }
        }
        examples.push(GeoTaggedExample {
            location,
            feature,
            label: Some(label),
        });
    }
    Dataset::new(examples, spec.feature_dim, q)
}

fn pick_weighted<R: Rng>(weights: &[f64], rng: &mut R) -> usize {
    if weights.len() == 1 {
        return 0;
    }
    let x = rng.gen::<f64>();
    let mut acc = 0.0;
    for (i, w) in weights.iter().enumerate() {
        acc += w;
        if x < acc {
            return i;
        }
    }
    weights.len() - 1
}

/// Per-class proportional subsample: round(lambda% of the class count),
/// at least one from every non-empty class, chosen uniformly without
/// replacement. Output ordering is canonical: class id, then original index.
pub fn stratified_sample<R: Rng>(
    dataset: &Dataset,
    lambda_percent: f64,
    rng: &mut R,
) -> Result<Dataset> {
    if !dataset.is_labeled() {
        return Err(Error::Usage(
            "stratified_sample needs a labeled dataset".into(),
        ));
    }
    if !(lambda_percent > 0.0 && lambda_percent <= 100.0) {
        return Err(Error::Config(format!(
            "lambda must be in (0, 100], got {lambda_percent}"
        )));
    }
    let mut by_class: Vec<Vec<usize>> = vec![Vec::new(); dataset.num_classes()];
    for (i, ex) in dataset.examples().iter().enumerate() {
        by_class[ex.label.expect("labeled dataset")].push(i);
    }
    let mut selected = Vec::new();
    for indices in by_class.iter() {
        if indices.is_empty() {
            continue;
        }
        let want = ((indices.len() as f64 * lambda_percent / 100.0).round() as usize)
            .max(1)
            .min(indices.len());
        let mut pool = indices.clone();
        // Partial Fisher-Yates: the first `want` slots are a uniform draw
        // without replacement.
        for i in 0..want {
            let j = rng.gen_range(i..pool.len());
            pool.swap(i, j);
        }
        let mut chosen: Vec<usize> = pool[..want].to_vec();
        chosen.sort_unstable();
        selected.extend(chosen);
    }
    Ok(dataset.subset(&selected))
}

/// A materialized minibatch.
#[derive(Debug, Clone)]
pub struct Batch {
    pub locations: Vec<GeoLocation>,
    /// N x feature_dim matrix of frozen feature vectors.
    pub features: Matrix,
    pub labels: Option<Vec<usize>>,
}

impl Batch {
    pub fn len(&self) -> usize {
        self.locations.len()
    }

    pub fn is_empty(&self) -> bool {
        self.locations.is_empty()
    }
}

/// Seeded epoch over `dataset` in batches of `batch_size`. The order is one
/// shuffled permutation; a final batch smaller than 2 is dropped because it
/// cannot provide in-batch negatives.
pub fn minibatches<'a, R: Rng>(
    dataset: &'a Dataset,
    batch_size: usize,
    rng: &mut R,
) -> Result<impl Iterator<Item = Batch> + 'a> {
    if batch_size < 1 {
        return Err(Error::Config("batch size must be at least 1".into()));
    }
    let mut order: Vec<usize> = (0..dataset.len()).collect();
    order.shuffle(rng);
    let chunks: Vec<Vec<usize>> = order
        .chunks(batch_size)
        .filter(|c| c.len() >= 2.min(batch_size))
        .map(|c| c.to_vec())
        .collect();
    Ok(chunks.into_iter().map(move |ids| make_batch(dataset, &ids)))
}

fn make_batch(dataset: &Dataset, ids: &[usize]) -> Batch {
    let mut features = Matrix::zeros(ids.len(), dataset.feature_dim());
    let mut locations = Vec::with_capacity(ids.len());
    let mut labels = if dataset.is_labeled() {
        Some(Vec::with_capacity(ids.len()))
    } else {
        None
    };
    for (row, &i) in ids.iter().enumerate() {
        let ex = dataset.get(i);
        locations.push(ex.location);
        features.row_mut(row).copy_from_slice(&ex.feature);
        if let Some(l) = labels.as_mut() {
            l.push(ex.label.expect("labeled dataset"));
        }
    }
    Batch {
        locations,
        features,
        labels,
    }
}

/// Write the dataset as the versioned text table
/// `GEOCSP v1 M=<n> DIM=<n> Q=<n>` followed by one
/// `lon lat label f0 .. f_{DIM-1}` record per line (label -1 when absent).
/// Floats use shortest round-trip decimals, so save/load is bit-exact.
pub fn save(path: &Path, dataset: &Dataset) -> Result<()> {
    let mut out = String::new();
    writeln_header(&mut out, dataset);
    for ex in dataset.examples() {
        let mut line = String::new();
        write!(line, "{} {}", ex.location.lon(), ex.location.lat()).unwrap();
        match ex.label {
            Some(y) => write!(line, " {y}").unwrap(),
            None => line.push_str(" -1"),
        }
        for v in &ex.feature {
            write!(line, " {v}").unwrap();
        }
        out.push_str(&line);
        out.push('\n');
    }
    std::fs::write(path, out)?;
    Ok(())
}

fn writeln_header(out: &mut String, dataset: &Dataset) {
    writeln!(
        out,
        "GEOCSP v{FORMAT_VERSION} M={} DIM={} Q={}",
        dataset.len(),
        dataset.feature_dim(),
        dataset.num_classes()
    )
    .unwrap();
}

/// Read a dataset written by [`save`]. Malformed headers, future versions,
/// record dimension mismatches, and truncated files are distinct errors.
pub fn load(path: &Path) -> Result<Dataset> {
    let text = std::fs::read_to_string(path)?;
    let path_str = path.display().to_string();
    let mut lines = text.lines();
    let header = lines.next().ok_or_else(|| Error::MalformedHeader {
        path: path_str.clone(),
        msg: "empty file".into(),
    })?;
    let (m, dim, q) = parse_header(header, &path_str)?;

    let mut examples = Vec::with_capacity(m);
    for (line_no, line) in lines.by_ref().enumerate() {
        let line_no = line_no + 2; // header is line 1
        if line.trim().is_empty() {
            continue;
        }
        if examples.len() == m {
            return Err(Error::Parse {
                path: path_str,
                line: line_no,
                msg: format!("unexpected data after {m} records"),
            });
        }
        let fields: Vec<&str> = line.split_ascii_whitespace().collect();
        if fields.len() != 3 + dim {
            return Err(Error::DimensionMismatch {
                path: path_str,
                line: line_no,
                expected: 3 + dim,
                found: fields.len(),
            });
        }
        let parse_f64 = |s: &str, what: &str| -> Result<f64> {
            s.parse::<f64>().map_err(|_| Error::Parse {
                path: path_str.clone(),
                line: line_no,
                msg: format!("bad {what} '{s}'"),
            })
        };
        let lon = parse_f64(fields[0], "longitude")?;
        let lat = parse_f64(fields[1], "latitude")?;
        let label_raw: i64 = fields[2].parse().map_err(|_| Error::Parse {
            path: path_str.clone(),
            line: line_no,
            msg: format!("bad label '{}'", fields[2]),
        })?;
        let label = match label_raw {
            -1 => None,
            y if y >= 0 => Some(y as usize),
            y => {
                return Err(Error::Parse {
                    path: path_str,
                    line: line_no,
                    msg: format!("bad label {y}"),
                })
            }
        };
        let mut feature = Vec::with_capacity(dim);
        for s in &fields[3..] {
            feature.push(parse_f64(s, "feature")?);
        }
        let location = GeoLocation::new(lon, lat)?;
        examples.push(GeoTaggedExample {
            location,
            feature,
            label,
        });
    }
    if examples.len() < m {
        return Err(Error::Truncated {
            path: path_str,
            expected: m,
            found: examples.len(),
        });
    }
    Dataset::new(examples, dim, q)
}

fn parse_header(header: &str, path: &str) -> Result<(usize, usize, usize)> {
    let bad = |msg: String| Error::MalformedHeader {
        path: path.to_string(),
        msg,
    };
    let tokens: Vec<&str> = header.split_ascii_whitespace().collect();
    if tokens.len() != 5 || tokens[0] != "GEOCSP" {
        return Err(bad(format!("expected 'GEOCSP v<N> M=.. DIM=.. Q=..', got '{header}'")));
    }
    let version: u32 = tokens[1]
        .strip_prefix('v')
        .and_then(|v| v.parse().ok())
        .ok_or_else(|| bad(format!("bad version token '{}'", tokens[1])))?;
    if version > FORMAT_VERSION {
        return Err(Error::UnsupportedVersion {
            path: path.to_string(),
            found: version,
            supported: FORMAT_VERSION,
        });
    }
    let field = |tok: &str, key: &str| -> Result<usize> {
        tok.strip_prefix(key)
            .and_then(|v| v.strip_prefix('='))
            .and_then(|v| v.parse().ok())
            .ok_or_else(|| bad(format!("bad field '{tok}', expected {key}=<int>")))
    };
    Ok((
        field(tokens[2], "M")?,
        field(tokens[3], "DIM")?,
        field(tokens[4], "Q")?,
    ))
}
