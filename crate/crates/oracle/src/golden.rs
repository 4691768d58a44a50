//! Golden cases: generation from the reference implementations, the
//! `manifest` sidecar, and drift checking against checked-in files.

use std::fmt;
use std::fs;
use std::path::Path;

use crate::pgt::Pgt;
use crate::reference::{self as r, Stream};
use crate::OracleError;

pub const MANIFEST: &str = "manifest";

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Provenance {
    Trivial,
    Derived,
}

impl fmt::Display for Provenance {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Provenance::Trivial => "TRIVIAL",
            Provenance::Derived => "DERIVED",
        })
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Tolerance {
    Abs(f64),
    Rel(f64),
}

impl Tolerance {
    pub fn accepts(self, expected: f64, got: f64) -> bool {
        let err = (expected - got).abs();
        match self {
            Tolerance::Abs(t) => err <= t,
            Tolerance::Rel(t) => err <= t * expected.abs().max(f64::MIN_POSITIVE),
        }
    }
}

impl fmt::Display for Tolerance {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Tolerance::Abs(t) => write!(f, "abs:{t:e}"),
            Tolerance::Rel(t) => write!(f, "rel:{t:e}"),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub enum Expected {
    Scalars(Vec<f64>),
    File(String),
}

#[derive(Clone, Debug, PartialEq)]
pub struct GoldenCase {
    pub name: String,
    pub provenance: Provenance,
    pub inputs: Vec<String>,
    pub expected: Expected,
    pub tolerance: Tolerance,
}

impl GoldenCase {
    fn line(&self) -> String {
        let inputs = if self.inputs.is_empty() { "-".to_string() } else { self.inputs.join(",") };
        let expected = match &self.expected {
            Expected::Scalars(v) => {
                format!("scalar:{}", v.iter().map(|x| format!("{x:?}")).collect::<Vec<_>>().join(";"))
            }
            Expected::File(f) => format!("file:{f}"),
        };
        format!("{}\t{}\t{}\t{}\t{}", self.name, self.provenance, inputs, expected, self.tolerance)
    }

    fn parse(line: &str) -> Result<Self, OracleError> {
        let bad = || OracleError::Manifest(format!("malformed line `{line}`"));
        let f: Vec<&str> = line.split('\t').collect();
        if f.len() != 5 {
            return Err(bad());
        }
        let provenance = match f[1] {
            "TRIVIAL" => Provenance::Trivial,
            "DERIVED" => Provenance::Derived,
            _ => return Err(bad()),
        };
        let inputs = if f[2] == "-" { Vec::new() } else { f[2].split(',').map(str::to_string).collect() };
        let expected = if let Some(v) = f[3].strip_prefix("scalar:") {
            Expected::Scalars(v.split(';').map(|s| s.parse().map_err(|_| bad())).collect::<Result<_, _>>()?)
        } else if let Some(p) = f[3].strip_prefix("file:") {
            Expected::File(p.to_string())
        } else {
            return Err(bad());
        };
        let tolerance = if let Some(t) = f[4].strip_prefix("abs:") {
            Tolerance::Abs(t.parse().map_err(|_| bad())?)
        } else if let Some(t) = f[4].strip_prefix("rel:") {
            Tolerance::Rel(t.parse().map_err(|_| bad())?)
        } else {
            return Err(bad());
        };
        Ok(Self {
            name: f[0].to_string(),
            provenance,
            inputs,
            expected,
            tolerance,
        })
    }
}

/// All cases with the file contents they reference.
pub struct GoldenSet {
    pub cases: Vec<GoldenCase>,
    pub files: Vec<(String, Pgt)>,
}

impl GoldenSet {
    pub fn file(&self, name: &str) -> Option<&Pgt> {
        self.files.iter().find(|(n, _)| n == name).map(|(_, t)| t)
    }
}

fn matrix(t: &Pgt) -> Vec<Vec<f64>> {
    let cols = t.shape[1];
    t.data.chunks(cols).map(|r| r.iter().map(|&v| v as f64).collect()).collect()
}

fn normal_tensor(seed: u64, shape: Vec<usize>) -> Pgt {
    let mut s = Stream::new(seed);
    let n = shape.iter().product();
    Pgt::new(shape, (0..n).map(|_| s.normal() as f32).collect())
}

/// Regenerate every golden from the reference implementations.
pub fn generate() -> GoldenSet {
    let mut cases = Vec::new();
    let mut files = Vec::new();
    let mut case = |name: &str, provenance, inputs: &[&str], expected, tolerance| {
        cases.push(GoldenCase {
            name: name.to_string(),
            provenance,
            inputs: inputs.iter().map(|s| s.to_string()).collect(),
            expected,
            tolerance,
        })
    };

    // schedule products; the stored betas are f32, so derive from those
    files.push(("schedule_t2_betas.pgt".to_string(), Pgt::new(vec![2], vec![0.1, 0.2])));
    case(
        "schedule_t2_alpha_bars",
        Provenance::Derived,
        &["schedule_t2_betas.pgt"],
        Expected::Scalars(r::alpha_bars(&[0.1f32 as f64, 0.2f32 as f64])),
        Tolerance::Abs(1e-12),
    );
    let t = 1000;
    let betas: Vec<f64> = (0..t).map(|i| 1e-4 + (0.02 - 1e-4) * i as f64 / (t - 1) as f64).collect();
    case(
        "schedule_t1000_final_alpha_bar",
        Provenance::Derived,
        &[],
        Expected::Scalars(vec![*r::alpha_bars(&betas).last().unwrap()]),
        Tolerance::Rel(1e-9),
    );

    // scalar sampler transcripts: z = 0.7, eps = -0.3, noise = 0.5, betas (0.1, 0.2)
    let b2 = [0.1, 0.2];
    case(
        "ddpm_scalar_t2",
        Provenance::Derived,
        &[],
        Expected::Scalars(vec![r::ddpm_step(0.7, -0.3, 2, &b2, 0.5), r::ddpm_step(0.7, -0.3, 1, &b2, 0.5)]),
        Tolerance::Abs(1e-6),
    );
    case(
        "ddim_scalar_t2",
        Provenance::Derived,
        &[],
        Expected::Scalars(vec![r::ddim_step(0.7, -0.3, 2, 1, &b2), r::ddim_step(0.7, -0.3, 2, 0, &b2)]),
        Tolerance::Abs(1e-6),
    );

    // KID double loop on random [50, 8] features
    let kx = normal_tensor(101, vec![50, 8]);
    let ky = normal_tensor(202, vec![50, 8]).data.iter().map(|v| v + 0.25).collect();
    let ky = Pgt::new(vec![50, 8], ky);
    let kid = r::kid(&matrix(&kx), &matrix(&ky));
    files.push(("kid_x.pgt".to_string(), kx));
    files.push(("kid_y.pgt".to_string(), ky));
    case(
        "kid_random_50x8",
        Provenance::Derived,
        &["kid_x.pgt", "kid_y.pgt"],
        Expected::Scalars(vec![kid]),
        Tolerance::Rel(1e-9),
    );

    // rectangle dilated by 5 px
    let (h, w) = (32, 32);
    let rect: Vec<Vec<bool>> = (0..h)
        .map(|y| (0..w).map(|x| (10..18).contains(&y) && (12..22).contains(&x)).collect())
        .collect();
    let flat = |m: &[Vec<bool>]| m.iter().flatten().map(|&b| b as u8 as f32).collect::<Vec<_>>();
    files.push(("dilation_rect.pgt".to_string(), Pgt::new(vec![h, w], flat(&rect))));
    files.push(("dilation_rect_d5.pgt".to_string(), Pgt::new(vec![h, w], flat(&r::dilate(&rect, 5)))));
    case(
        "dilation_rect_d5",
        Provenance::Derived,
        &["dilation_rect.pgt"],
        Expected::File("dilation_rect_d5.pgt".to_string()),
        Tolerance::Abs(0.0),
    );

    // PSD square root, d = 8: trace of the Denman–Beavers root of A = BᵀB + I
    let b = matrix(&normal_tensor(303, vec![8, 8]));
    let bt: Vec<Vec<f64>> = (0..8).map(|i| (0..8).map(|j| b[j][i]).collect()).collect();
    let mut a = r::matmul(&bt, &b);
    for (i, row) in a.iter_mut().enumerate() {
        row[i] += 1.0;
    }
    let a32 = Pgt::new(vec![8, 8], a.iter().flatten().map(|&v| v as f32).collect());
    let a_exact = matrix(&a32);
    files.push(("psd_a.pgt".to_string(), a32));
    case(
        "psd_sqrt_trace_d8",
        Provenance::Derived,
        &["psd_a.pgt"],
        Expected::Scalars(vec![r::trace(&r::matrix_sqrt(&a_exact))]),
        Tolerance::Rel(1e-9),
    );

    // finite differences of silu
    let xs = [-1.5f32, -0.3, 0.4, 2.0];
    files.push(("silu_x.pgt".to_string(), Pgt::new(vec![4], xs.to_vec())));
    case(
        "silu_derivative",
        Provenance::Derived,
        &["silu_x.pgt"],
        Expected::Scalars(xs.iter().map(|&x| r::derivative(r::silu, x as f64, 1e-5)).collect()),
        Tolerance::Abs(1e-4),
    );

    // 1-D Fréchet closed forms: N(0,1)↔N(1,1) and N(0,1)↔N(0,4)
    let fid1 = |ma: f64, va: f64, mb: f64, vb: f64| (ma - mb).powi(2) + va + vb - 2.0 * (va * vb).sqrt();
    case(
        "fid_1d_closed_forms",
        Provenance::Derived,
        &[],
        Expected::Scalars(vec![fid1(0.0, 1.0, 1.0, 1.0), fid1(0.0, 1.0, 0.0, 4.0)]),
        Tolerance::Abs(1e-6),
    );
    case(
        "kernel_hand_value",
        Provenance::Trivial,
        &[],
        Expected::Scalars(vec![r::kernel(&[1.0, 0.0], &[1.0, 0.0])]),
        Tolerance::Abs(0.0),
    );

    GoldenSet { cases, files }
}

fn manifest_text(set: &GoldenSet) -> String {
    let mut s = String::from("# name\tprovenance\tinputs\texpected\ttolerance\n");
    for c in &set.cases {
        s.push_str(&c.line());
        s.push('\n');
    }
    s
}

fn io(path: &Path) -> impl FnOnce(std::io::Error) -> OracleError + '_ {
    move |e| OracleError::Io(path.to_path_buf(), e)
}

/// Write every golden file and the manifest into `dir`.
pub fn write(dir: &Path) -> Result<(), OracleError> {
    let set = generate();
    fs::create_dir_all(dir).map_err(io(dir))?;
    for (name, t) in &set.files {
        let p = dir.join(name);
        fs::write(&p, t.encode()).map_err(io(&p))?;
    }
    let p = dir.join(MANIFEST);
    fs::write(&p, manifest_text(&set)).map_err(io(&p))
}

/// Parse `dir/manifest`.
pub fn load_manifest(dir: &Path) -> Result<Vec<GoldenCase>, OracleError> {
    let p = dir.join(MANIFEST);
    let text = fs::read_to_string(&p).map_err(io(&p))?;
    text.lines()
        .filter(|l| !l.trim().is_empty() && !l.starts_with('#'))
        .map(GoldenCase::parse)
        .collect()
}

pub fn load_file(dir: &Path, name: &str) -> Result<Pgt, OracleError> {
    let p = dir.join(name);
    Pgt::decode(&fs::read(&p).map_err(io(&p))?)
}

#[derive(Clone, Debug, PartialEq)]
pub struct Outcome {
    pub name: String,
    pub drift: Option<String>,
}

fn compare_values(tol: Tolerance, want: &[f64], got: &[f64]) -> Option<String> {
    if want.len() != got.len() {
        return Some(format!("{} values checked in, {} regenerated", got.len(), want.len()));
    }
    want.iter()
        .zip(got)
        .enumerate()
        .find(|(_, (w, g))| !tol.accepts(**w, **g))
        .map(|(i, (w, g))| format!("value {i}: regenerated {w:?}, checked in {g:?} ({tol})"))
}

/// Regenerate every case and compare it with the files in `dir`.
pub fn check(dir: &Path) -> Result<Vec<Outcome>, OracleError> {
    let set = generate();
    let on_disk = load_manifest(dir)?;
    let mut out = Vec::new();
    for case in &set.cases {
        let drift = match on_disk.iter().find(|c| c.name == case.name) {
            None => Some("missing from manifest".to_string()),
            Some(disk) => check_case(dir, &set, case, disk),
        };
        out.push(Outcome {
            name: case.name.clone(),
            drift,
        });
    }
    for disk in &on_disk {
        if !set.cases.iter().any(|c| c.name == disk.name) {
            out.push(Outcome {
                name: disk.name.clone(),
                drift: Some("no oracle regenerates this case".to_string()),
            });
        }
    }
    Ok(out)
}

fn check_case(dir: &Path, set: &GoldenSet, case: &GoldenCase, disk: &GoldenCase) -> Option<String> {
    if case.inputs != disk.inputs || case.provenance != disk.provenance || case.tolerance != disk.tolerance {
        return Some("manifest entry differs from the regenerated one".to_string());
    }
    for name in &case.inputs {
        let fresh = set.file(name).expect("generated input");
        match load_file(dir, name) {
            Ok(t) if &t == fresh => {}
            Ok(_) => return Some(format!("input {name} differs from the regenerated one")),
            Err(e) => return Some(e.to_string()),
        }
    }
    match (&case.expected, &disk.expected) {
        (Expected::Scalars(want), Expected::Scalars(got)) => compare_values(case.tolerance, want, got),
        (Expected::File(a), Expected::File(b)) if a == b => {
            let fresh = set.file(a).expect("generated expectation");
            match load_file(dir, b) {
                Ok(t) if t.shape != fresh.shape => Some(format!("{b}: shape {:?} vs {:?}", t.shape, fresh.shape)),
                Ok(t) => {
                    let want: Vec<f64> = fresh.data.iter().map(|&v| v as f64).collect();
                    let got: Vec<f64> = t.data.iter().map(|&v| v as f64).collect();
                    compare_values(case.tolerance, &want, &got)
                }
                Err(e) => Some(e.to_string()),
            }
        }
        _ => Some("expectation kind differs".to_string()),
    }
}
