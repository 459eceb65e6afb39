//! Datasets: synthetic shapes, OFF meshes, XYZ point files, normalization
//! and augmentation.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use crate::error::{ensure, Error, Result};
use crate::neighbors::PointCloud;
use crate::numkit::{Matrix, Rng};

/// Labelled clouds plus the class names the labels index into.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub samples: Vec<(PointCloud, usize)>,
    pub class_names: Vec<String>,
}

impl Dataset {
    pub fn new(class_names: Vec<String>) -> Self {
        Self {
            samples: Vec::new(),
            class_names,
        }
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn num_classes(&self) -> usize {
        self.class_names.len()
    }

    pub fn push(&mut self, cloud: PointCloud, label: usize) -> Result<()> {
        ensure!(
            label < self.class_names.len(),
            "label {label} out of range for {} classes",
            self.class_names.len()
        );
        self.samples.push((cloud, label));
        Ok(())
    }

    /// Number of samples per class.
    pub fn class_counts(&self) -> Vec<usize> {
        let mut counts = vec![0; self.class_names.len()];
        for (_, label) in &self.samples {
            counts[*label] += 1;
        }
        counts
    }
}

/// Random scale, translation and jitter applied to training clouds.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AugmentConfig {
    pub scale_range: (f64, f64),
    pub translate_range: (f64, f64),
    pub jitter_std: f64,
}

impl Default for AugmentConfig {
    fn default() -> Self {
        Self {
            scale_range: (2.0 / 3.0, 1.5),
            translate_range: (-0.2, 0.2),
            jitter_std: 0.01,
        }
    }
}

impl AugmentConfig {
    pub fn identity() -> Self {
        Self {
            scale_range: (1.0, 1.0),
            translate_range: (0.0, 0.0),
            jitter_std: 0.0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let (lo, hi) = self.scale_range;
        ensure!(
            lo > 0.0 && hi >= lo,
            "scale range must be positive and ordered"
        );
        ensure!(
            self.translate_range.1 >= self.translate_range.0,
            "translate range must be ordered"
        );
        ensure!(self.jitter_std >= 0.0, "jitter std must be non-negative");
        Ok(())
    }
}

/// Analytic surfaces for the synthetic classification task.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ShapeClass {
    Sphere,
    Cube,
    Torus,
    Cylinder,
    Cone,
    Octahedron,
}

impl ShapeClass {
    pub const ALL: [ShapeClass; 6] = [
        ShapeClass::Sphere,
        ShapeClass::Cube,
        ShapeClass::Torus,
        ShapeClass::Cylinder,
        ShapeClass::Cone,
        ShapeClass::Octahedron,
    ];

    pub const DEFAULT: [ShapeClass; 3] = [ShapeClass::Sphere, ShapeClass::Cube, ShapeClass::Torus];

    pub fn name(self) -> &'static str {
        match self {
            ShapeClass::Sphere => "sphere",
            ShapeClass::Cube => "cube",
            ShapeClass::Torus => "torus",
            ShapeClass::Cylinder => "cylinder",
            ShapeClass::Cone => "cone",
            ShapeClass::Octahedron => "octahedron",
        }
    }

    /// One point drawn uniformly by area from the surface.
    fn sample(self, rng: &mut Rng) -> [f64; 3] {
        match self {
            ShapeClass::Sphere => unit_vector(rng),
            ShapeClass::Cube => {
                let face = rng.below(6);
                let (axis, sign) = (face / 2, if face % 2 == 0 { 1.0 } else { -1.0 });
                let mut p = [
                    rng.uniform_range(-1.0, 1.0),
                    rng.uniform_range(-1.0, 1.0),
                    0.0,
                ];
                p.swap(2, axis);
                p[axis] = sign;
                p
            }
            ShapeClass::Torus => {
                let (big, small) = (1.0, 0.4);
                // Rejection on the tube angle so that the density is uniform by area.
                let phi = loop {
                    let phi = rng.uniform_range(0.0, std::f64::consts::TAU);
                    let accept = (big + small * phi.cos()) / (big + small);
                    if rng.uniform() < accept {
                        break phi;
                    }
                };
                let theta = rng.uniform_range(0.0, std::f64::consts::TAU);
                let ring = big + small * phi.cos();
                [ring * theta.cos(), ring * theta.sin(), small * phi.sin()]
            }
            ShapeClass::Cylinder => {
                // Radius 1, height 2: side area 4π, caps 2π in total.
                let theta = rng.uniform_range(0.0, std::f64::consts::TAU);
                if rng.uniform() < 4.0 / 6.0 {
                    [theta.cos(), theta.sin(), rng.uniform_range(-1.0, 1.0)]
                } else {
                    let r = rng.uniform().sqrt();
                    let z = if rng.uniform() < 0.5 { 1.0 } else { -1.0 };
                    [r * theta.cos(), r * theta.sin(), z]
                }
            }
            ShapeClass::Cone => {
                // Apex at z = 1, base radius 1 at z = −1: slant area π√5, base π.
                let theta = rng.uniform_range(0.0, std::f64::consts::TAU);
                let slant = 5f64.sqrt();
                if rng.uniform() < slant / (slant + 1.0) {
                    let r = rng.uniform().sqrt();
                    [r * theta.cos(), r * theta.sin(), 1.0 - 2.0 * r]
                } else {
                    let r = rng.uniform().sqrt();
                    [r * theta.cos(), r * theta.sin(), -1.0]
                }
            }
            ShapeClass::Octahedron => {
                let mut a = rng.uniform();
                let mut b = rng.uniform();
                if a + b > 1.0 {
                    a = 1.0 - a;
                    b = 1.0 - b;
                }
                let c = 1.0 - a - b;
                let sign = |bit: usize| if bit == 0 { 1.0 } else { -1.0 };
                let o = rng.below(8);
                [sign(o & 1) * a, sign(o >> 1 & 1) * b, sign(o >> 2 & 1) * c]
            }
        }
    }

    /// Whether the surface is symmetric under `p ↦ −p`.
    fn centrally_symmetric(self) -> bool {
        !matches!(self, ShapeClass::Cone)
    }
}

impl FromStr for ShapeClass {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        ShapeClass::ALL
            .into_iter()
            .find(|c| c.name() == s)
            .ok_or_else(|| Error::UnknownClass(s.to_string()))
    }
}

fn unit_vector(rng: &mut Rng) -> [f64; 3] {
    loop {
        let v = [rng.normal(), rng.normal(), rng.normal()];
        let n = (v[0] * v[0] + v[1] * v[1] + v[2] * v[2]).sqrt();
        if n > 1e-12 {
            return [v[0] / n, v[1] / n, v[2] / n];
        }
    }
}

/// Samples `n` surface points of one shape. Centrally symmetric shapes are
/// sampled in antipodal pairs so that their centroid is the origin.
pub fn sample_shape(class: ShapeClass, n: usize, rng: &mut Rng) -> Result<PointCloud> {
    ensure!(n >= 1, "need at least one point");
    let mut pts = Vec::with_capacity(n);
    if class.centrally_symmetric() {
        let pairs = if n % 2 == 1 && class == ShapeClass::Sphere && n >= 3 {
            (n - 3) / 2
        } else {
            n / 2
        };
        for _ in 0..pairs {
            let p = class.sample(rng);
            pts.push(p);
            pts.push([-p[0], -p[1], -p[2]]);
        }
        if pts.len() + 3 == n && class == ShapeClass::Sphere {
            // Three points 120° apart on a random great circle.
            let u = unit_vector(rng);
            let mut w = unit_vector(rng);
            let d = u[0] * w[0] + u[1] * w[1] + u[2] * w[2];
            for c in 0..3 {
                w[c] -= d * u[c];
            }
            let wn = (w[0] * w[0] + w[1] * w[1] + w[2] * w[2]).sqrt();
            for k in 0..3 {
                let a = k as f64 * std::f64::consts::TAU / 3.0;
                pts.push([
                    u[0] * a.cos() + w[0] / wn * a.sin(),
                    u[1] * a.cos() + w[1] / wn * a.sin(),
                    u[2] * a.cos() + w[2] / wn * a.sin(),
                ]);
            }
        }
    }
    while pts.len() < n {
        pts.push(class.sample(rng));
    }
    PointCloud::from_points(&pts)
}

/// `count_per_class` normalized clouds of `n_points` for each class, labels
/// following the order of `classes`.
pub fn synth_shapes(
    classes: &[ShapeClass],
    n_points: usize,
    count_per_class: usize,
    rng: &mut Rng,
) -> Result<Dataset> {
    ensure!(n_points >= 8, "synthetic clouds need at least 8 points");
    ensure!(!classes.is_empty(), "no classes requested");
    let mut ds = Dataset::new(classes.iter().map(|c| c.name().to_string()).collect());
    for (label, &class) in classes.iter().enumerate() {
        for _ in 0..count_per_class {
            let cloud = normalize_unit_sphere(&sample_shape(class, n_points, rng)?)?;
            ds.push(cloud, label)?;
        }
    }
    Ok(ds)
}

/// Synthetic dataset by class names.
pub fn synth_shapes_named(
    names: &[&str],
    n_points: usize,
    count_per_class: usize,
    rng: &mut Rng,
) -> Result<Dataset> {
    let classes = names
        .iter()
        .map(|n| n.parse())
        .collect::<Result<Vec<ShapeClass>>>()?;
    synth_shapes(&classes, n_points, count_per_class, rng)
}

/// Subtracts the centroid and divides by the largest point norm. A cloud
/// whose points all coincide is only centered.
pub fn normalize_unit_sphere(cloud: &PointCloud) -> Result<PointCloud> {
    ensure!(!cloud.is_empty(), "cannot normalize an empty cloud");
    let n = cloud.len();
    let mut centroid = [0.0; 3];
    for i in 0..n {
        let p = cloud.point(i);
        for c in 0..3 {
            centroid[c] += p[c];
        }
    }
    for v in &mut centroid {
        *v /= n as f64;
    }
    let mut out = cloud.clone();
    let coords = out.coords_mut();
    let mut max_norm = 0.0f64;
    for i in 0..n {
        let row = coords.row_mut(i);
        for c in 0..3 {
            row[c] -= centroid[c];
        }
        max_norm = max_norm.max((row[0] * row[0] + row[1] * row[1] + row[2] * row[2]).sqrt());
    }
    if max_norm > 0.0 {
        for v in coords.as_mut_slice() {
            *v /= max_norm;
        }
    }
    Ok(out)
}

/// Isotropic scale, then one translation per cloud, then per-point jitter.
pub fn augment(cloud: &PointCloud, cfg: &AugmentConfig, rng: &mut Rng) -> PointCloud {
    let scale = rng.uniform_range(cfg.scale_range.0, cfg.scale_range.1);
    let shift = [
        rng.uniform_range(cfg.translate_range.0, cfg.translate_range.1),
        rng.uniform_range(cfg.translate_range.0, cfg.translate_range.1),
        rng.uniform_range(cfg.translate_range.0, cfg.translate_range.1),
    ];
    let mut out = cloud.clone();
    let coords = out.coords_mut();
    for i in 0..coords.rows() {
        let row = coords.row_mut(i);
        for c in 0..3 {
            row[c] = row[c] * scale + shift[c];
        }
    }
    if cfg.jitter_std > 0.0 {
        for v in coords.as_mut_slice() {
            *v += cfg.jitter_std * rng.normal();
        }
    }
    out
}

/// Triangle mesh.
#[derive(Debug, Clone, PartialEq)]
pub struct Mesh {
    pub vertices: Vec<[f64; 3]>,
    pub triangles: Vec<[usize; 3]>,
}

impl Mesh {
    pub fn triangle_area(&self, t: usize) -> f64 {
        let [a, b, c] = self.triangles[t].map(|i| self.vertices[i]);
        let u = [b[0] - a[0], b[1] - a[1], b[2] - a[2]];
        let v = [c[0] - a[0], c[1] - a[1], c[2] - a[2]];
        let x = u[1] * v[2] - u[2] * v[1];
        let y = u[2] * v[0] - u[0] * v[2];
        let z = u[0] * v[1] - u[1] * v[0];
        0.5 * (x * x + y * y + z * z).sqrt()
    }
}

pub fn parse_off(path: &Path) -> Result<Mesh> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_off_str(&text, path)
}

/// Parses ASCII OFF. Polygons with more than three vertices are fan
/// triangulated. `path` is only used in error messages.
pub fn parse_off_str(text: &str, path: &Path) -> Result<Mesh> {
    let err = |line: usize, msg: String| Error::Parse {
        path: path.to_path_buf(),
        line,
        msg,
    };
    let mut lines = text
        .lines()
        .enumerate()
        .map(|(i, l)| (i + 1, l.split('#').next().unwrap_or("").trim()))
        .filter(|(_, l)| !l.is_empty());

    let (line_no, header) = lines
        .next()
        .ok_or_else(|| err(1, "missing OFF header".into()))?;
    let rest = header
        .strip_prefix("OFF")
        .ok_or_else(|| err(line_no, format!("expected `OFF`, found `{header}`")))?
        .trim();
    // Some ModelNet files glue the counts onto the header line.
    let (counts_line, counts) = if rest.is_empty() {
        lines
            .next()
            .ok_or_else(|| err(line_no + 1, "missing vertex/face counts".into()))?
    } else {
        (line_no, rest)
    };
    let counts: Vec<usize> = counts
        .split_whitespace()
        .map(|t| t.parse::<usize>())
        .collect::<std::result::Result<_, _>>()
        .map_err(|_| err(counts_line, format!("bad counts `{counts}`")))?;
    if counts.len() < 2 {
        return Err(err(counts_line, "expected vertex and face counts".into()));
    }
    let (nv, nf) = (counts[0], counts[1]);

    let mut vertices = Vec::with_capacity(nv);
    for v in 0..nv {
        let (line, l) = lines
            .next()
            .ok_or_else(|| err(counts_line, format!("expected {nv} vertices, found {v}")))?;
        let xyz: Vec<f64> = l
            .split_whitespace()
            .map(str::parse)
            .collect::<std::result::Result<_, _>>()
            .map_err(|_| err(line, format!("bad vertex `{l}`")))?;
        if xyz.len() < 3 || !xyz.iter().all(|x| x.is_finite()) {
            return Err(err(line, format!("bad vertex `{l}`")));
        }
        vertices.push([xyz[0], xyz[1], xyz[2]]);
    }

    let mut triangles = Vec::with_capacity(nf);
    for f in 0..nf {
        let (line, l) = lines
            .next()
            .ok_or_else(|| err(counts_line, format!("expected {nf} faces, found {f}")))?;
        let ids: Vec<usize> = l
            .split_whitespace()
            .map(str::parse)
            .collect::<std::result::Result<_, _>>()
            .map_err(|_| err(line, format!("bad face `{l}`")))?;
        let Some((&count, rest)) = ids.split_first() else {
            return Err(err(line, "empty face".into()));
        };
        if count < 3 || rest.len() < count {
            return Err(err(line, format!("face declares {count} vertices")));
        }
        let poly = &rest[..count];
        if let Some(&bad) = poly.iter().find(|&&i| i >= nv) {
            return Err(err(line, format!("vertex index {bad} out of range")));
        }
        for t in 1..count - 1 {
            triangles.push([poly[0], poly[t], poly[t + 1]]);
        }
    }
    Ok(Mesh {
        vertices,
        triangles,
    })
}

/// Area-weighted face choice, then a uniform point in the chosen triangle.
pub fn sample_mesh(mesh: &Mesh, n: usize, rng: &mut Rng) -> Result<PointCloud> {
    let mut cumulative = Vec::with_capacity(mesh.triangles.len());
    let mut total = 0.0;
    for t in 0..mesh.triangles.len() {
        total += mesh.triangle_area(t);
        cumulative.push(total);
    }
    ensure!(total > 0.0, "mesh has zero surface area");
    let mut pts = Vec::with_capacity(n);
    for _ in 0..n {
        let u = rng.uniform() * total;
        let t = cumulative
            .partition_point(|&c| c <= u)
            .min(cumulative.len() - 1);
        let [a, b, c] = mesh.triangles[t].map(|i| mesh.vertices[i]);
        let (mut r1, mut r2) = (rng.uniform(), rng.uniform());
        if r1 + r2 > 1.0 {
            r1 = 1.0 - r1;
            r2 = 1.0 - r2;
        }
        pts.push([
            a[0] + r1 * (b[0] - a[0]) + r2 * (c[0] - a[0]),
            a[1] + r1 * (b[1] - a[1]) + r2 * (c[1] - a[1]),
            a[2] + r1 * (b[2] - a[2]) + r2 * (c[2] - a[2]),
        ]);
    }
    PointCloud::from_points(&pts)
}

pub fn parse_xyz(path: &Path) -> Result<PointCloud> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_xyz_str(&text, path)
}

/// Lines of `x y z [feature ...]`; blank lines and `#` comments are skipped.
/// Every line must carry the same number of values.
pub fn parse_xyz_str(text: &str, path: &Path) -> Result<PointCloud> {
    let mut coords = Vec::new();
    let mut features = Vec::new();
    let mut width: Option<usize> = None;
    for (i, raw) in text.lines().enumerate() {
        let line = raw.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let err = |msg: String| Error::Parse {
            path: path.to_path_buf(),
            line: i + 1,
            msg,
        };
        let values: Vec<f64> = line
            .split_whitespace()
            .map(|t| {
                t.parse::<f64>()
                    .map_err(|_| err(format!("non-numeric token `{t}`")))
            })
            .collect::<Result<_>>()?;
        if values.len() < 3 {
            return Err(err(format!(
                "expected at least 3 values, found {}",
                values.len()
            )));
        }
        match width {
            None => width = Some(values.len()),
            Some(w) if w != values.len() => {
                return Err(err(format!("expected {w} values, found {}", values.len())))
            }
            _ => {}
        }
        coords.extend_from_slice(&values[..3]);
        features.extend_from_slice(&values[3..]);
    }
    let n = coords.len() / 3;
    let cloud = PointCloud::new(Matrix::from_vec(n, 3, coords)?)?;
    match width {
        Some(w) if w > 3 => cloud.with_features(Matrix::from_vec(n, w - 3, features)?),
        _ => Ok(cloud),
    }
}

/// One line per point with 17 significant digits, which round-trips every
/// `f64` exactly.
pub fn format_xyz(cloud: &PointCloud) -> String {
    let mut out = String::new();
    for i in 0..cloud.len() {
        let mut values: Vec<f64> = cloud.coords().row(i).to_vec();
        if let Some(f) = cloud.features() {
            values.extend_from_slice(f.row(i));
        }
        let line: Vec<String> = values.iter().map(|v| format!("{v:.16e}")).collect();
        let _ = writeln!(out, "{}", line.join(" "));
    }
    out
}

pub fn write_xyz(path: &Path, cloud: &PointCloud) -> Result<()> {
    fs::write(path, format_xyz(cloud)).map_err(|e| Error::io(path, e))
}

/// Reads a tab-separated `path<TAB>class` manifest. Relative paths resolve
/// against the manifest's directory; `.off` meshes are sampled with
/// `n_points` points, `.xyz` files are read as-is. Every cloud is
/// normalized, and labels index the sorted class names.
pub fn load_manifest(path: &Path, n_points: usize, rng: &mut Rng) -> Result<Dataset> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let base = path.parent().unwrap_or(Path::new("."));
    let mut entries: Vec<(PathBuf, String)> = Vec::new();
    for (i, raw) in text.lines().enumerate() {
        let line = raw.trim_end();
        if line.trim().is_empty() || line.trim_start().starts_with('#') {
            continue;
        }
        let (file, class) = line.split_once('\t').ok_or_else(|| Error::Parse {
            path: path.to_path_buf(),
            line: i + 1,
            msg: "expected `path<TAB>class`".into(),
        })?;
        let file = Path::new(file.trim());
        let file = if file.is_absolute() {
            file.to_path_buf()
        } else {
            base.join(file)
        };
        entries.push((file, class.trim().to_string()));
    }
    if entries.is_empty() {
        return Err(Error::EmptyDataset);
    }
    let mut class_names: Vec<String> = entries.iter().map(|(_, c)| c.clone()).collect();
    class_names.sort();
    class_names.dedup();
    let mut ds = Dataset::new(class_names);
    for (file, class) in entries {
        let label = ds
            .class_names
            .binary_search(&class)
            .expect("class collected above");
        let cloud = match file.extension().and_then(|e| e.to_str()) {
            Some(ext) if ext.eq_ignore_ascii_case("off") => {
                sample_mesh(&parse_off(&file)?, n_points, rng)?
            }
            _ => parse_xyz(&file)?,
        };
        ds.push(normalize_unit_sphere(&cloud)?, label)?;
    }
    Ok(ds)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn norms(cloud: &PointCloud) -> Vec<f64> {
        (0..cloud.len())
            .map(|i| {
                let p = cloud.point(i);
                (p[0] * p[0] + p[1] * p[1] + p[2] * p[2]).sqrt()
            })
            .collect()
    }

    #[test]
    fn sphere_points_have_unit_radius() {
        for n in [8, 9, 11, 256] {
            let ds = synth_shapes(&[ShapeClass::Sphere], n, 3, &mut Rng::new(n as u64)).unwrap();
            for (cloud, _) in &ds.samples {
                assert_eq!(cloud.len(), n);
                for r in norms(cloud) {
                    assert!((r - 1.0).abs() < 1e-9, "radius {r}");
                }
            }
        }
    }

    #[test]
    fn every_class_normalizes_to_unit_max_norm() {
        let ds = synth_shapes(&ShapeClass::ALL, 64, 2, &mut Rng::new(1)).unwrap();
        assert_eq!(ds.len(), 12);
        assert_eq!(ds.class_counts(), vec![2; 6]);
        for (cloud, _) in &ds.samples {
            let max = norms(cloud).into_iter().fold(0.0, f64::max);
            assert!((max - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn synthetic_data_is_seeded() {
        let a = synth_shapes(&ShapeClass::DEFAULT, 32, 2, &mut Rng::new(5)).unwrap();
        let b = synth_shapes(&ShapeClass::DEFAULT, 32, 2, &mut Rng::new(5)).unwrap();
        let c = synth_shapes(&ShapeClass::DEFAULT, 32, 2, &mut Rng::new(6)).unwrap();
        assert_eq!(a, b);
        assert_ne!(a, c);
    }

    #[test]
    fn synthetic_guards() {
        assert!(synth_shapes(&ShapeClass::DEFAULT, 7, 1, &mut Rng::new(0)).is_err());
        assert!(matches!(
            synth_shapes_named(&["sphere", "teapot"], 16, 1, &mut Rng::new(0)),
            Err(Error::UnknownClass(c)) if c == "teapot"
        ));
    }

    #[test]
    fn shape_samples_lie_on_their_surfaces() {
        let mut rng = Rng::new(3);
        for _ in 0..500 {
            let p = ShapeClass::Cube.sample(&mut rng);
            let m = p.iter().fold(0.0f64, |a, v| a.max(v.abs()));
            assert!((m - 1.0).abs() < 1e-15);
            let [x, y, z] = ShapeClass::Torus.sample(&mut rng);
            let ring = (x * x + y * y).sqrt() - 1.0;
            assert!((ring * ring + z * z - 0.16).abs() < 1e-12);
            let [x, y, z] = ShapeClass::Octahedron.sample(&mut rng);
            assert!((x.abs() + y.abs() + z.abs() - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn normalize_hand_example_and_idempotence() {
        let c = PointCloud::from_points(&[[0.0, 0.0, 0.0], [2.0, 0.0, 0.0]]).unwrap();
        let n = normalize_unit_sphere(&c).unwrap();
        assert_eq!(n.point(0), [-1.0, 0.0, 0.0]);
        assert_eq!(n.point(1), [1.0, 0.0, 0.0]);
        let again = normalize_unit_sphere(&n).unwrap();
        assert!(again.coords().max_abs_diff(n.coords()) < 1e-12);
    }

    #[test]
    fn normalize_coincident_points_only_centers() {
        let c = PointCloud::from_points(&[[3.0, 1.0, 2.0]; 4]).unwrap();
        let n = normalize_unit_sphere(&c).unwrap();
        assert!(n.coords().as_slice().iter().all(|&v| v == 0.0));
        assert!(normalize_unit_sphere(&PointCloud::from_points(&[]).unwrap()).is_err());
    }

    #[test]
    fn identity_augmentation() {
        let ds = synth_shapes(&[ShapeClass::Cube], 32, 1, &mut Rng::new(0)).unwrap();
        let cloud = &ds.samples[0].0;
        let out = augment(cloud, &AugmentConfig::identity(), &mut Rng::new(1));
        assert_eq!(&out, cloud);
    }

    #[test]
    fn fixed_scale_doubles_norms() {
        let ds = synth_shapes(&[ShapeClass::Sphere], 32, 1, &mut Rng::new(0)).unwrap();
        let cloud = &ds.samples[0].0;
        let cfg = AugmentConfig {
            scale_range: (2.0, 2.0),
            translate_range: (0.0, 0.0),
            jitter_std: 0.0,
        };
        let out = augment(cloud, &cfg, &mut Rng::new(1));
        for (a, b) in norms(cloud).iter().zip(norms(&out)) {
            assert!((2.0 * a - b).abs() < 1e-15);
        }
    }

    #[test]
    fn default_augmentation_stays_bounded_and_seeded() {
        let ds = synth_shapes(&ShapeClass::DEFAULT, 128, 5, &mut Rng::new(0)).unwrap();
        let cfg = AugmentConfig::default();
        let bound = 1.5 + 0.2 * 3f64.sqrt() + 5.0 * cfg.jitter_std;
        let mut rng = Rng::new(2);
        for (cloud, _) in &ds.samples {
            let out = augment(cloud, &cfg, &mut rng);
            assert!(norms(&out).into_iter().all(|r| r <= bound));
        }
        let a = augment(&ds.samples[0].0, &cfg, &mut Rng::new(9));
        let b = augment(&ds.samples[0].0, &cfg, &mut Rng::new(9));
        assert_eq!(a, b);
    }

    const TWO_TRIANGLES: &str = "OFF\n\
        # areas 1 and 3\n\
        6 2 0\n\
        0 0 0\n2 0 0\n0 1 0\n\
        0 0 1\n2 0 1\n0 3 1\n\
        3 0 1 2\n3 3 4 5\n";

    #[test]
    fn parses_off_and_fan_triangulates() {
        let m = parse_off_str(TWO_TRIANGLES, Path::new("t.off")).unwrap();
        assert_eq!(m.vertices.len(), 6);
        assert_eq!(m.triangles, vec![[0, 1, 2], [3, 4, 5]]);
        assert_eq!(m.triangle_area(0), 1.0);
        assert_eq!(m.triangle_area(1), 3.0);

        let quad = "OFF 4 1 0\n0 0 0\n1 0 0\n1 1 0\n0 1 0\n4 0 1 2 3\n";
        let m = parse_off_str(quad, Path::new("q.off")).unwrap();
        assert_eq!(m.triangles, vec![[0, 1, 2], [0, 2, 3]]);
    }

    #[test]
    fn off_errors_carry_line_numbers() {
        let cases = [
            ("PLY\n", 1),
            ("OFF\nthree 1 0\n", 2),
            ("OFF\n3 1 0\n0 0 0\n1 0 0\n0 x 0\n3 0 1 2\n", 5),
            ("OFF\n3 1 0\n0 0 0\n1 0 0\n0 1 0\n3 0 1 7\n", 6),
            ("OFF\n3 1 0\n0 0 0\n1 0 0\n0 1 0\n2 0 1\n", 6),
            ("OFF\n3 2 0\n0 0 0\n1 0 0\n0 1 0\n3 0 1 2\n", 2),
        ];
        for (text, line) in cases {
            match parse_off_str(text, Path::new("bad.off")) {
                Err(Error::Parse { line: l, .. }) => assert_eq!(l, line, "{text:?}"),
                other => panic!("{text:?}: {other:?}"),
            }
        }
    }

    #[test]
    fn mesh_samples_stay_inside_the_right_triangle() {
        let m = Mesh {
            vertices: vec![[0.0, 0.0, 0.0], [1.0, 0.0, 0.0], [0.0, 1.0, 0.0]],
            triangles: vec![[0, 1, 2]],
        };
        let cloud = sample_mesh(&m, 1000, &mut Rng::new(0)).unwrap();
        for i in 0..1000 {
            let [x, y, z] = cloud.point(i);
            assert!(x >= 0.0 && y >= 0.0 && x + y <= 1.0 + 1e-15 && z == 0.0);
        }
    }

    #[test]
    fn mesh_sampling_follows_area() {
        let m = parse_off_str(TWO_TRIANGLES, Path::new("t.off")).unwrap();
        let n = 10_000;
        let cloud = sample_mesh(&m, n, &mut Rng::new(1)).unwrap();
        let upper = (0..n).filter(|&i| cloud.point(i)[2] == 1.0).count() as f64;
        // Binomial(n, 3/4): 5 standard deviations.
        let sd = (n as f64 * 0.75 * 0.25).sqrt();
        assert!((upper - 0.75 * n as f64).abs() < 5.0 * sd, "{upper}");
    }

    #[test]
    fn zero_area_faces_are_never_sampled() {
        let m = Mesh {
            vertices: vec![
                [0.0, 0.0, 0.0],
                [1.0, 0.0, 0.0],
                [0.0, 1.0, 0.0],
                [5.0, 5.0, 5.0],
            ],
            triangles: vec![[3, 3, 3], [0, 1, 2], [0, 3, 3]],
        };
        let cloud = sample_mesh(&m, 2000, &mut Rng::new(2)).unwrap();
        assert!((0..2000).all(|i| cloud.point(i)[2] == 0.0));
        let flat = Mesh {
            vertices: vec![[0.0; 3]; 3],
            triangles: vec![[0, 1, 2]],
        };
        assert!(sample_mesh(&flat, 10, &mut Rng::new(0)).is_err());
    }

    #[test]
    fn xyz_round_trip_is_exact() {
        let mut rng = Rng::new(4);
        let coords =
            Matrix::from_vec(20, 3, (0..60).map(|_| rng.normal() * 1e3).collect()).unwrap();
        let feats =
            Matrix::from_vec(20, 2, (0..40).map(|_| rng.uniform() * 1e-7).collect()).unwrap();
        let cloud = PointCloud::new(coords)
            .unwrap()
            .with_features(feats)
            .unwrap();
        let back = parse_xyz_str(&format_xyz(&cloud), Path::new("x")).unwrap();
        assert_eq!(back, cloud);
    }

    #[test]
    fn xyz_comments_empty_and_errors() {
        let c = parse_xyz_str("# header\n1 2 3\n\n  # more\n4 5 6\n", Path::new("x")).unwrap();
        assert_eq!(c.len(), 2);
        assert_eq!(c.point(1), [4.0, 5.0, 6.0]);
        assert!(parse_xyz_str("", Path::new("x")).unwrap().is_empty());
        match parse_xyz_str("1 2 3\n1 two 3\n", Path::new("x")) {
            Err(Error::Parse { line, .. }) => assert_eq!(line, 2),
            other => panic!("{other:?}"),
        }
        assert!(parse_xyz_str("1 2 3\n1 2 3 4\n", Path::new("x")).is_err());
    }

    #[test]
    fn manifest_loads_sorted_classes() {
        let dir = tempfile::tempdir().unwrap();
        let cube = dir.path().join("cube.xyz");
        write_xyz(
            &cube,
            &sample_shape(ShapeClass::Cube, 16, &mut Rng::new(0)).unwrap(),
        )
        .unwrap();
        fs::write(dir.path().join("tri.off"), TWO_TRIANGLES).unwrap();
        let manifest = dir.path().join("list.tsv");
        fs::write(&manifest, "tri.off\tzeta\ncube.xyz\talpha\n").unwrap();
        let ds = load_manifest(&manifest, 32, &mut Rng::new(1)).unwrap();
        assert_eq!(ds.class_names, vec!["alpha", "zeta"]);
        assert_eq!(ds.samples[0].1, 1);
        assert_eq!(ds.samples[0].0.len(), 32);
        assert_eq!(ds.samples[1].1, 0);
        assert_eq!(ds.samples[1].0.len(), 16);

        fs::write(&manifest, "cube.xyz alpha\n").unwrap();
        assert!(matches!(
            load_manifest(&manifest, 32, &mut Rng::new(1)),
            Err(Error::Parse { line: 1, .. })
        ));
        fs::write(&manifest, "# nothing\n").unwrap();
        assert!(matches!(
            load_manifest(&manifest, 32, &mut Rng::new(1)),
            Err(Error::EmptyDataset)
        ));
    }
}
