//! Receptive-field and stride calculus over a linear layer chain.
//!
//! Feature maps are indexed `0..=L`: map 0 is the input image and map `j` is
//! the output of the `j`-th layer. Receptive fields are tracked per axis; on
//! square kernels both axes agree.
//!
//! Residual blocks are described by their main path. Parallel shortcuts never
//! reach farther than the main path, so the sequential figure is an upper
//! bound on the true cone.

use std::collections::HashSet;
use std::fmt::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::{Error, Result};

/// Bundled ResNet-50 main path with the last-stage stride removed (384x128 input).
pub const RESNET50_LAST_STRIDE1: &str = include_str!("../specs/resnet50_last_stride1.arch");
/// Bundled toy chain matching the default model layout (48x16 input).
pub const TOY_BACKBONE: &str = include_str!("../specs/toy_backbone.arch");

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Extent2 {
    pub h: usize,
    pub w: usize,
}

impl Extent2 {
    pub const fn new(h: usize, w: usize) -> Self {
        Self { h, w }
    }

    pub const fn square(v: usize) -> Self {
        Self { h: v, w: v }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ArchKind {
    Conv,
    MaxPool,
    AvgPool,
    BatchNorm,
    Relu,
}

impl ArchKind {
    fn parse(s: &str) -> Option<Self> {
        Some(match s {
            "conv" => ArchKind::Conv,
            "maxpool" => ArchKind::MaxPool,
            "avgpool" => ArchKind::AvgPool,
            "batchnorm" | "bn" => ArchKind::BatchNorm,
            "relu" => ArchKind::Relu,
            _ => return None,
        })
    }

    pub fn as_str(self) -> &'static str {
        match self {
            ArchKind::Conv => "conv",
            ArchKind::MaxPool => "maxpool",
            ArchKind::AvgPool => "avgpool",
            ArchKind::BatchNorm => "batchnorm",
            ArchKind::Relu => "relu",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ArchLayer {
    pub name: String,
    pub kind: ArchKind,
    pub kernel: Extent2,
    pub stride: Extent2,
    pub padding: Extent2,
}

impl ArchLayer {
    pub fn new(name: impl Into<String>, kind: ArchKind, kernel: usize, stride: usize, padding: usize) -> Self {
        Self {
            name: name.into(),
            kind,
            kernel: Extent2::square(kernel),
            stride: Extent2::square(stride),
            padding: Extent2::square(padding),
        }
    }
}

/// Architecture description: a validated layer chain and its input size.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ArchSpec {
    input: Extent2,
    layers: Vec<ArchLayer>,
}

impl ArchSpec {
    pub fn new(input: Extent2, layers: Vec<ArchLayer>) -> Result<Self> {
        if layers.is_empty() {
            return Err(Error::InvalidParams("architecture has no layers".into()));
        }
        if input.h == 0 || input.w == 0 {
            return Err(Error::InvalidParams(format!("input size {}x{} is empty", input.h, input.w)));
        }
        let mut names = HashSet::new();
        for l in &layers {
            if l.kernel.h == 0 || l.kernel.w == 0 || l.stride.h == 0 || l.stride.w == 0 {
                return Err(Error::InvalidParams(format!(
                    "layer {}: kernel and stride must be >= 1",
                    l.name
                )));
            }
            if !names.insert(l.name.as_str()) {
                return Err(Error::InvalidParams(format!("duplicate layer name {}", l.name)));
            }
        }
        Ok(Self { input, layers })
    }

    /// Parses the `name kind kh kw sh sw ph pw [dilation]` line format, with an
    /// `input H W` directive and `#` comments.
    pub fn parse(text: &str, source: &str) -> Result<Self> {
        let err = |line: usize, msg: String| Error::Parse {
            path: source.to_string(),
            line,
            msg,
        };
        let mut input = None;
        let mut layers = Vec::new();
        let mut names = HashSet::new();
        for (i, raw) in text.lines().enumerate() {
            let line_no = i + 1;
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let tok: Vec<&str> = line.split_whitespace().collect();
            let num = |s: &str, what: &str| -> Result<usize> {
                s.parse::<usize>()
                    .map_err(|_| err(line_no, format!("{what}: expected a non-negative integer, got {s:?}")))
            };
            if tok[0] == "input" {
                if tok.len() != 3 {
                    return Err(err(line_no, "expected `input H W`".into()));
                }
                input = Some(Extent2::new(num(tok[1], "height")?, num(tok[2], "width")?));
                continue;
            }
            if tok.len() != 8 && tok.len() != 9 {
                return Err(err(
                    line_no,
                    format!("expected `name kind kh kw sh sw ph pw`, got {} fields", tok.len()),
                ));
            }
            let kind = ArchKind::parse(tok[1]).ok_or_else(|| err(line_no, format!("unknown layer kind {:?}", tok[1])))?;
            let layer = ArchLayer {
                name: tok[0].to_string(),
                kind,
                kernel: Extent2::new(num(tok[2], "kh")?, num(tok[3], "kw")?),
                stride: Extent2::new(num(tok[4], "sh")?, num(tok[5], "sw")?),
                padding: Extent2::new(num(tok[6], "ph")?, num(tok[7], "pw")?),
            };
            if tok.len() == 9 && num(tok[8], "dilation")? != 1 {
                return Err(err(line_no, "dilation other than 1 is not supported".into()));
            }
            if layer.kernel.h == 0 || layer.kernel.w == 0 || layer.stride.h == 0 || layer.stride.w == 0 {
                return Err(err(line_no, "kernel and stride must be >= 1".into()));
            }
            if !names.insert(layer.name.clone()) {
                return Err(err(line_no, format!("duplicate layer name {}", layer.name)));
            }
            layers.push(layer);
        }
        let input = input.ok_or_else(|| err(0, "missing `input H W` line".into()))?;
        Self::new(input, layers).map_err(|e| err(0, e.to_string()))
    }

    pub fn from_file(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text, &path.display().to_string())
    }

    pub fn resnet50_last_stride1() -> Self {
        Self::parse(RESNET50_LAST_STRIDE1, "resnet50_last_stride1.arch").expect("bundled spec parses")
    }

    pub fn toy_backbone() -> Self {
        Self::parse(TOY_BACKBONE, "toy_backbone.arch").expect("bundled spec parses")
    }

    pub fn to_text(&self) -> String {
        let mut s = format!("input {} {}\n", self.input.h, self.input.w);
        for l in &self.layers {
            let _ = writeln!(
                s,
                "{} {} {} {} {} {} {} {}",
                l.name,
                l.kind.as_str(),
                l.kernel.h,
                l.kernel.w,
                l.stride.h,
                l.stride.w,
                l.padding.h,
                l.padding.w
            );
        }
        s
    }

    pub fn input(&self) -> Extent2 {
        self.input
    }

    pub fn layers(&self) -> &[ArchLayer] {
        &self.layers
    }

    /// Number of layers `L`; maps are indexed `0..=L`.
    pub fn depth(&self) -> usize {
        self.layers.len()
    }

    pub fn with_input(&self, input: Extent2) -> Result<Self> {
        Self::new(input, self.layers.clone())
    }

    /// Map index of the output of the named layer.
    pub fn map_index(&self, name: &str) -> Option<usize> {
        self.layers.iter().position(|l| l.name == name).map(|i| i + 1)
    }

    fn check_range(&self, i: usize, j: usize) -> Result<()> {
        if i > j {
            return Err(Error::Ordering { start: i, end: j });
        }
        if j > self.depth() {
            return Err(Error::InvalidParams(format!(
                "map index {j} beyond depth {}",
                self.depth()
            )));
        }
        Ok(())
    }

    /// Receptive field of map `j` neurons measured on map `i`.
    ///
    /// `r(i, i) = 1`, and each layer adds `(k - 1)` times the stride product
    /// of the layers before it.
    pub fn receptive_field(&self, i: usize, j: usize) -> Result<Extent2> {
        self.check_range(i, j)?;
        let (mut rh, mut rw) = (1, 1);
        let (mut sh, mut sw) = (1, 1);
        for l in &self.layers[i..j] {
            rh += (l.kernel.h - 1) * sh;
            rw += (l.kernel.w - 1) * sw;
            sh *= l.stride.h;
            sw *= l.stride.w;
        }
        Ok(Extent2::new(rh, rw))
    }

    /// Product of the strides of the layers between maps `i` and `j`.
    pub fn cumulative_stride(&self, i: usize, j: usize) -> Result<Extent2> {
        self.check_range(i, j)?;
        Ok(self.layers[i..j].iter().fold(Extent2::new(1, 1), |acc, l| {
            Extent2::new(acc.h * l.stride.h, acc.w * l.stride.w)
        }))
    }

    /// Input pixels of padding in front of map `j` row/column 0, i.e. the
    /// input coordinate of the first tap of neuron 0 is `-offset`.
    pub fn padding_offset(&self, j: usize) -> Result<Extent2> {
        self.check_range(0, j)?;
        let (mut oh, mut ow) = (0, 0);
        let (mut sh, mut sw) = (1, 1);
        for l in &self.layers[..j] {
            oh += l.padding.h * sh;
            ow += l.padding.w * sw;
            sh *= l.stride.h;
            sw *= l.stride.w;
        }
        Ok(Extent2::new(oh, ow))
    }

    /// Spatial size of every map `0..=L`.
    pub fn feature_sizes(&self) -> Result<Vec<Extent2>> {
        let mut sizes = vec![self.input];
        let mut cur = self.input;
        for l in &self.layers {
            let ext = |size: usize, k: usize, s: usize, p: usize, dim: &str| -> Result<usize> {
                if size + 2 * p < k {
                    return Err(Error::InvalidParams(format!(
                        "layer {}: padded {dim} {} smaller than kernel {k}",
                        l.name,
                        size + 2 * p
                    )));
                }
                Ok((size + 2 * p - k) / s + 1)
            };
            cur = Extent2::new(
                ext(cur.h, l.kernel.h, l.stride.h, l.padding.h, "height")?,
                ext(cur.w, l.kernel.w, l.stride.w, l.padding.w, "width")?,
            );
            sizes.push(cur);
        }
        Ok(sizes)
    }

    pub fn analyze(&self) -> Result<ReceptiveReport> {
        let sizes = self.feature_sizes()?;
        let mut rows = Vec::with_capacity(self.depth() + 1);
        for (j, size) in sizes.into_iter().enumerate() {
            rows.push(ReportRow {
                index: j,
                name: if j == 0 { "input".into() } else { self.layers[j - 1].name.clone() },
                rf: self.receptive_field(0, j)?,
                stride: self.cumulative_stride(0, j)?,
                size,
            });
        }
        Ok(ReceptiveReport { rows })
    }

    /// Plans a receptive partition of map `split` into `stripes` horizontal
    /// stripes.
    pub fn restricted_region(&self, split: usize, stripes: usize) -> Result<PartitionPlan> {
        self.check_range(0, split)?;
        if stripes == 0 {
            return Err(Error::InvalidParams("stripe count must be >= 1".into()));
        }
        let sizes = self.feature_sizes()?;
        let h = sizes[split].h;
        if h % stripes != 0 {
            return Err(Error::Partition {
                height: h,
                stripes,
                hint: self.partition_hint(&sizes, split, stripes),
            });
        }
        let stripe_height = h / stripes;
        let rf = self.receptive_field(0, split)?.h;
        let stride = self.cumulative_stride(0, split)?.h;
        let subsequent_rf = self.receptive_field(split, self.depth())?.h;
        Ok(PartitionPlan {
            split,
            stripes,
            map_height: h,
            stripe_height,
            restricted: rf + (stripe_height - 1) * stride,
            subsequent_rf,
            effective: subsequent_rf >= stripe_height,
            input_stride: stride,
            input_offset: self.padding_offset(split)?.h,
            input_height: self.input.h,
        })
    }

    fn partition_hint(&self, sizes: &[Extent2], split: usize, stripes: usize) -> String {
        let h = sizes[split].h;
        let divisor = (1..=h.max(1))
            .filter(|d| h.is_multiple_of(*d))
            .min_by_key(|&d| (d.abs_diff(stripes), d))
            .unwrap_or(1);
        let depth = (0..sizes.len())
            .filter(|&j| sizes[j].h.is_multiple_of(stripes) && sizes[j].h >= stripes)
            .min_by_key(|&j| (j.abs_diff(split), j));
        let mut hint = format!("; nearest valid stripe count at map {split} is {divisor}");
        if let Some(j) = depth {
            let _ = write!(hint, "; nearest map divisible by {stripes} is {j} (height {})", sizes[j].h);
        }
        hint
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ReportRow {
    pub index: usize,
    pub name: String,
    pub rf: Extent2,
    pub stride: Extent2,
    pub size: Extent2,
}

/// Per-map receptive field, cumulative stride and spatial size.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ReceptiveReport {
    pub rows: Vec<ReportRow>,
}

impl ReceptiveReport {
    pub fn final_row(&self) -> &ReportRow {
        self.rows.last().expect("report has the input row")
    }

    pub fn to_csv(&self) -> String {
        let mut s = String::from("layer,rf_h,rf_w,stride_h,stride_w,h,w\n");
        for r in &self.rows {
            let _ = writeln!(
                s,
                "{},{},{},{},{},{},{}",
                r.name, r.rf.h, r.rf.w, r.stride.h, r.stride.w, r.size.h, r.size.w
            );
        }
        s
    }

    pub fn to_table(&self) -> String {
        let width = self.rows.iter().map(|r| r.name.len()).max().unwrap_or(5).max(5);
        let mut s = format!(
            "{:>4}  {:<width$}  {:>9}  {:>9}  {:>9}\n",
            "map", "layer", "rf", "stride", "size"
        );
        for r in &self.rows {
            let _ = writeln!(
                s,
                "{:>4}  {:<width$}  {:>9}  {:>9}  {:>9}",
                r.index,
                r.name,
                format!("{}x{}", r.rf.h, r.rf.w),
                format!("{}x{}", r.stride.h, r.stride.w),
                format!("{}x{}", r.size.h, r.size.w),
            );
        }
        s
    }
}

/// A receptive partition of one map into horizontal stripes (height axis).
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct PartitionPlan {
    pub split: usize,
    pub stripes: usize,
    pub map_height: usize,
    pub stripe_height: usize,
    /// Input rows one stripe can see: `r(0, j) + (h_j / n_s - 1) * S(0, j)`.
    pub restricted: usize,
    /// Receptive field of the network after the split, on the split map.
    pub subsequent_rf: usize,
    /// Whether the subsequent network can see past one stripe.
    pub effective: bool,
    pub input_stride: usize,
    pub input_offset: usize,
    pub input_height: usize,
}

impl PartitionPlan {
    /// Input rows `[lo, hi]` (inclusive, before clipping) reachable from stripe `k`.
    pub fn stripe_region(&self, k: usize) -> (isize, isize) {
        let lo = (k * self.stripe_height * self.input_stride) as isize - self.input_offset as isize;
        (lo, lo + self.restricted as isize - 1)
    }

    /// [`Self::stripe_region`] clipped to the input image.
    pub fn stripe_region_clipped(&self, k: usize) -> (usize, usize) {
        let (lo, hi) = self.stripe_region(k);
        (lo.max(0) as usize, hi.min(self.input_height as isize - 1).max(0) as usize)
    }
}

/// Feasibility of every `(split, stripes)` pair.
pub fn partition_grid(arch: &ArchSpec, stripe_counts: &[usize]) -> Result<String> {
    let sizes = arch.feature_sizes()?;
    let mut s = String::from("split,layer,h,n_s,stripe_h,restricted,subsequent_rf,effective\n");
    for (j, size) in sizes.iter().enumerate() {
        let name = if j == 0 { "input" } else { arch.layers[j - 1].name.as_str() };
        for &n in stripe_counts {
            match arch.restricted_region(j, n) {
                Ok(p) => {
                    let _ = writeln!(
                        s,
                        "{j},{name},{},{n},{},{},{},{}",
                        size.h, p.stripe_height, p.restricted, p.subsequent_rf, p.effective
                    );
                }
                Err(Error::Partition { .. }) => {
                    let _ = writeln!(s, "{j},{name},{},{n},,,,indivisible", size.h);
                }
                Err(e) => return Err(e),
            }
        }
    }
    Ok(s)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn chain(layers: &[(usize, usize)], input: usize) -> ArchSpec {
        ArchSpec::new(
            Extent2::square(input),
            layers
                .iter()
                .enumerate()
                .map(|(i, &(k, s))| ArchLayer::new(format!("l{i}"), ArchKind::Conv, k, s, k / 2))
                .collect(),
        )
        .unwrap()
    }

    #[test]
    fn single_layer_sees_kernel() {
        assert_eq!(chain(&[(3, 1)], 8).receptive_field(0, 1).unwrap(), Extent2::square(3));
    }

    #[test]
    fn two_stacked_layers() {
        assert_eq!(chain(&[(3, 1), (3, 1)], 8).receptive_field(0, 2).unwrap(), Extent2::square(5));
    }

    #[test]
    fn resnet50_golden_value() {
        let a = ArchSpec::resnet50_last_stride1();
        let r = a.analyze().unwrap();
        let last = r.final_row();
        assert_eq!(last.rf, Extent2::square(363));
        assert_eq!(last.stride, Extent2::square(16));
        assert_eq!(last.size, Extent2::new(24, 8));
    }

    #[test]
    fn stride_products() {
        let a = chain(&[(3, 1), (3, 1)], 8);
        assert_eq!(a.cumulative_stride(0, 2).unwrap(), Extent2::square(1));
        let b = chain(&[(3, 2), (3, 1), (3, 2)], 32);
        assert_eq!(b.cumulative_stride(0, 3).unwrap(), Extent2::square(4));
        assert_eq!(b.cumulative_stride(2, 2).unwrap(), Extent2::square(1));
    }

    #[test]
    fn ordering_error() {
        let a = chain(&[(3, 1), (3, 1)], 8);
        assert!(matches!(a.receptive_field(2, 1), Err(Error::Ordering { start: 2, end: 1 })));
        assert!(matches!(a.cumulative_stride(2, 0), Err(Error::Ordering { .. })));
    }

    #[test]
    fn split_at_input_halves_height() {
        let a = chain(&[(3, 1)], 10);
        let p = a.restricted_region(0, 2).unwrap();
        assert_eq!(p.restricted, 5);
    }

    #[test]
    fn pointwise_tail_is_ineffective() {
        let a = ArchSpec::new(
            Extent2::square(8),
            vec![
                ArchLayer::new("a", ArchKind::Conv, 3, 1, 1),
                ArchLayer::new("b", ArchKind::Conv, 1, 1, 0),
            ],
        )
        .unwrap();
        let p = a.restricted_region(1, 2).unwrap();
        assert_eq!(p.subsequent_rf, 1);
        assert!(!p.effective);
    }

    #[test]
    fn indivisible_split_suggests_alternatives() {
        let a = chain(&[(3, 1), (3, 2)], 12);
        let err = a.restricted_region(2, 4).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("nearest valid stripe count at map 2 is 3"), "{msg}");
        assert!(msg.contains("nearest map divisible by 4 is 1"), "{msg}");
    }

    #[test]
    fn report_is_monotone_and_consistent() {
        let a = ArchSpec::resnet50_last_stride1();
        let r = a.analyze().unwrap();
        assert_eq!(r.rows[0].rf, Extent2::square(1));
        for w in r.rows.windows(2) {
            assert!(w[1].rf.h >= w[0].rf.h);
        }
        for j in [3, 17, 40] {
            assert_eq!(r.rows[j].rf, a.receptive_field(0, j).unwrap());
            assert_eq!(r.rows[j].stride, a.cumulative_stride(0, j).unwrap());
        }
    }

    #[test]
    fn composition_through_intermediate_map() {
        let a = ArchSpec::resnet50_last_stride1();
        let n = a.depth();
        for j in [0, 5, 20, n] {
            let head = a.receptive_field(0, j).unwrap().h;
            let tail = a.receptive_field(j, n).unwrap().h;
            let s = a.cumulative_stride(0, j).unwrap().h;
            assert_eq!(head + (tail - 1) * s, a.receptive_field(0, n).unwrap().h);
        }
    }

    #[test]
    fn parse_errors_carry_line_numbers() {
        let err = ArchSpec::parse("input 8 8\nc conv 3 3 1 1 1\n", "x.arch").unwrap_err();
        assert!(matches!(err, Error::Parse { line: 2, .. }), "{err}");
        let err = ArchSpec::parse("input 8 8\nc conv 3 3 1 1 1 1 2\n", "x.arch").unwrap_err();
        assert!(err.to_string().contains("dilation"));
        let err = ArchSpec::parse("input 8 8\nc conv 0 3 1 1 1 1\n", "x.arch").unwrap_err();
        assert!(matches!(err, Error::Parse { line: 2, .. }));
        let err = ArchSpec::parse("input 8 8\nc conv 3 3 1 1 1 1\nc relu 1 1 1 1 0 0\n", "x.arch").unwrap_err();
        assert!(matches!(err, Error::Parse { line: 3, .. }));
        assert!(ArchSpec::parse("c conv 3 3 1 1 1 1\n", "x.arch").is_err());
    }

    #[test]
    fn text_round_trip() {
        let a = ArchSpec::resnet50_last_stride1();
        assert_eq!(ArchSpec::parse(&a.to_text(), "rt").unwrap(), a);
    }

    #[test]
    fn grid_marks_indivisible() {
        let a = ArchSpec::toy_backbone();
        let g = partition_grid(&a, &[2, 3, 5]).unwrap();
        assert!(g.lines().any(|l| l.starts_with("3,conv3,12,3,4,")));
        assert!(g.lines().any(|l| l.starts_with("3,conv3,12,5,") && l.ends_with("indivisible")));
    }
}
