//! Network descriptors: flat layer lists used both to build the toy
//! classifier and to count parameters and FLOPs for architectures that are
//! never executed (the ResNet-50 preset).
//!
//! Shortcut convolutions in bottleneck blocks are marked `parallel`: the
//! cost walker evaluates them at the current spatial size without letting
//! them advance it, and chain validation skips them. Ordering inside a
//! block keeps every record's input spatial size correct: the projection
//! shortcut is emitted just before the strided 3x3, its norm just after.

use crate::error::{Error, Result};
use crate::ops::conv_out_dim;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum LayerKind {
    Conv,
    ArcConv,
    Norm,
    Relu,
    /// Spatial pooling window when `stride >= 2`; global average pool when
    /// `k == 0` (collapses the map to 1x1).
    Pool,
    Linear,
}

#[derive(Clone, Copy, Debug)]
pub struct LayerRecord {
    pub kind: LayerKind,
    pub c_in: usize,
    pub c_out: usize,
    pub k: usize,
    pub stride: usize,
    pub padding: usize,
    /// Expert count for `ArcConv` records; 1 otherwise.
    pub n: usize,
    /// Repeat factor (identical consecutive layers).
    pub count: usize,
    /// Shortcut-branch record: costed but does not advance the main path.
    pub parallel: bool,
}

impl LayerRecord {
    fn simple(kind: LayerKind, c: usize) -> LayerRecord {
        LayerRecord {
            kind,
            c_in: c,
            c_out: c,
            k: 0,
            stride: 1,
            padding: 0,
            n: 1,
            count: 1,
            parallel: false,
        }
    }

    pub fn conv(c_in: usize, c_out: usize, k: usize, stride: usize, padding: usize) -> LayerRecord {
        LayerRecord {
            kind: LayerKind::Conv,
            c_in,
            c_out,
            k,
            stride,
            padding,
            n: 1,
            count: 1,
            parallel: false,
        }
    }

    pub fn arc_conv(
        c_in: usize,
        c_out: usize,
        k: usize,
        stride: usize,
        padding: usize,
        n: usize,
    ) -> LayerRecord {
        LayerRecord {
            kind: LayerKind::ArcConv,
            c_in,
            c_out,
            k,
            stride,
            padding,
            n,
            count: 1,
            parallel: false,
        }
    }

    pub fn norm(c: usize) -> LayerRecord {
        LayerRecord::simple(LayerKind::Norm, c)
    }

    pub fn relu(c: usize) -> LayerRecord {
        LayerRecord::simple(LayerKind::Relu, c)
    }

    pub fn global_pool(c: usize) -> LayerRecord {
        LayerRecord::simple(LayerKind::Pool, c)
    }

    pub fn linear(c_in: usize, c_out: usize) -> LayerRecord {
        LayerRecord {
            kind: LayerKind::Linear,
            c_in,
            c_out,
            k: 0,
            stride: 1,
            padding: 0,
            n: 1,
            count: 1,
            parallel: false,
        }
    }

    /// Trainable parameter count of one instance of this record.
    pub fn params(&self) -> u64 {
        let router = |c_in: usize, n: usize| -> u64 {
            // depthwise 3x3 + layer-norm affine + two heads (theta bias-free).
            (9 * c_in + 2 * c_in + n * c_in + n * c_in + n) as u64
        };
        match self.kind {
            LayerKind::Conv => (self.c_out * self.c_in * self.k * self.k) as u64,
            LayerKind::ArcConv => {
                (self.n * self.c_out * self.c_in * self.k * self.k) as u64
                    + router(self.c_in, self.n)
            }
            LayerKind::Norm => 2 * self.c_out as u64,
            LayerKind::Relu | LayerKind::Pool => 0,
            LayerKind::Linear => (self.c_out * self.c_in + self.c_out) as u64,
        }
    }
}

#[derive(Clone, Debug, Default)]
pub struct NetworkDescriptor {
    pub layers: Vec<LayerRecord>,
}

impl NetworkDescriptor {
    /// Total parameters (all repeats included).
    pub fn params(&self) -> u64 {
        self.layers
            .iter()
            .map(|l| l.params() * l.count as u64)
            .sum()
    }

    /// Verify that channel counts chain along the main path (parallel
    /// shortcut records are exempt) and that strides/kernels are sane.
    pub fn validate_chain(&self) -> Result<()> {
        let mut current: Option<usize> = None;
        for (i, l) in self.layers.iter().enumerate() {
            if l.count == 0 || l.stride == 0 {
                return Err(Error::config(format!("descriptor record {i}: {l:?}")));
            }
            if matches!(l.kind, LayerKind::ArcConv) && l.k < 3 {
                return Err(Error::config(format!(
                    "descriptor record {i}: adaptive rotation on a {}x{} kernel is a no-op",
                    l.k, l.k
                )));
            }
            if l.parallel {
                continue;
            }
            if let Some(c) = current {
                if l.c_in != c {
                    return Err(Error::config(format!(
                        "descriptor record {i}: input channels {} do not chain from {c}",
                        l.c_in
                    )));
                }
            }
            current = Some(l.c_out);
        }
        Ok(())
    }
}

/// Walk the descriptor tracking spatial size; calls `f(record, h_in, w_in,
/// h_out, w_out)` once per record (repeats folded into `count`).
pub fn walk_spatial(
    desc: &NetworkDescriptor,
    input_hw: (usize, usize),
    mut f: impl FnMut(&LayerRecord, (usize, usize), (usize, usize)),
) -> Result<()> {
    let (mut h, mut w) = input_hw;
    for l in &desc.layers {
        let out = match l.kind {
            LayerKind::Conv | LayerKind::ArcConv => {
                let ho = conv_out_dim(h, l.k, l.stride, l.padding);
                let wo = conv_out_dim(w, l.k, l.stride, l.padding);
                match (ho, wo) {
                    (Some(ho), Some(wo)) => (ho, wo),
                    _ => {
                        return Err(Error::config(format!(
                            "descriptor: {}x{} kernel does not fit {h}x{w}",
                            l.k, l.k
                        )))
                    }
                }
            }
            LayerKind::Pool => {
                if l.k == 0 {
                    (1, 1)
                } else {
                    match (
                        conv_out_dim(h, l.k, l.stride, l.padding),
                        conv_out_dim(w, l.k, l.stride, l.padding),
                    ) {
                        (Some(ho), Some(wo)) => (ho, wo),
                        _ => return Err(Error::config("descriptor: pool does not fit")),
                    }
                }
            }
            LayerKind::Norm | LayerKind::Relu | LayerKind::Linear => (h, w),
        };
        f(l, (h, w), out);
        if !l.parallel {
            h = out.0;
            w = out.1;
        }
    }
    Ok(())
}

/// Toy-classifier stages that can carry adaptive layers.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Default)]
pub struct StageSet {
    pub a: bool,
    pub b: bool,
    pub c: bool,
}

impl StageSet {
    pub const ALL: StageSet = StageSet {
        a: true,
        b: true,
        c: true,
    };

    pub fn none() -> StageSet {
        StageSet::default()
    }

    pub fn any(&self) -> bool {
        self.a || self.b || self.c
    }

    /// Parse "a,b,c" / "bc" style stage lists (case-insensitive).
    pub fn parse(s: &str) -> Result<StageSet> {
        let mut set = StageSet::default();
        for part in s
            .split(|ch: char| ch == ',' || ch.is_whitespace())
            .filter(|p| !p.is_empty())
        {
            for ch in part.chars() {
                match ch.to_ascii_lowercase() {
                    'a' => set.a = true,
                    'b' => set.b = true,
                    'c' => set.c = true,
                    _ => {
                        return Err(Error::config(format!(
                            "unknown stage '{ch}' (expected a, b, c)"
                        )))
                    }
                }
            }
        }
        Ok(set)
    }
}

impl std::fmt::Display for StageSet {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let mut parts = Vec::new();
        if self.a {
            parts.push("a");
        }
        if self.b {
            parts.push("b");
        }
        if self.c {
            parts.push("c");
        }
        write!(f, "{}", parts.join(","))
    }
}

pub const SMALLNET_STEM_CHANNELS: usize = 16;
pub const SMALLNET_STAGE_CHANNELS: [usize; 3] = [16, 32, 64];

/// Descriptor of the toy classifier. Stem: static 3x3 conv to 16 channels.
/// Three stages of two conv+norm+relu blocks at 16/32/64 channels, the
/// second and third opening with stride 2. Stages listed in `arc_stages`
/// use adaptive convolutions with `n` experts; the stem never does.
pub fn smallnet_descriptor(arc_stages: StageSet, n: usize, bins: usize) -> NetworkDescriptor {
    let mut layers = Vec::new();
    let stem = SMALLNET_STEM_CHANNELS;
    layers.push(LayerRecord::conv(1, stem, 3, 1, 1));
    layers.push(LayerRecord::norm(stem));
    layers.push(LayerRecord::relu(stem));
    let mut c_prev = stem;
    let stage_flags = [arc_stages.a, arc_stages.b, arc_stages.c];
    for (idx, (&c, adaptive)) in SMALLNET_STAGE_CHANNELS
        .iter()
        .zip(stage_flags)
        .enumerate()
    {
        for block in 0..2 {
            let stride = if idx > 0 && block == 0 { 2 } else { 1 };
            let c_in = if block == 0 { c_prev } else { c };
            let conv = if adaptive {
                LayerRecord::arc_conv(c_in, c, 3, stride, 1, n)
            } else {
                LayerRecord::conv(c_in, c, 3, stride, 1)
            };
            layers.push(conv);
            layers.push(LayerRecord::norm(c));
            layers.push(LayerRecord::relu(c));
        }
        c_prev = c;
    }
    layers.push(LayerRecord::global_pool(c_prev));
    layers.push(LayerRecord::linear(c_prev, bins));
    NetworkDescriptor { layers }
}

/// ResNet-50 bottleneck counting preset (convolutions and norms of the
/// backbone; the classifier head is not part of the detection backbone).
///
/// `replace_stages` lists stage numbers in 2..=4 whose 3x3 convolutions
/// become adaptive with `n` experts; `include_strided` controls whether
/// the stride-2 3x3 at each stage entry is replaced too.
pub fn resnet50_descriptor(
    replace_stages: &[usize],
    n: usize,
    include_strided: bool,
) -> Result<NetworkDescriptor> {
    if let Some(&bad) = replace_stages.iter().find(|&&s| !(2..=4).contains(&s)) {
        return Err(Error::config(format!(
            "resnet50: stage {bad} out of range (2..=4 can be replaced)"
        )));
    }
    let mut layers = Vec::new();
    layers.push(LayerRecord::conv(3, 64, 7, 2, 3));
    layers.push(LayerRecord::norm(64));
    layers.push(LayerRecord::relu(64));
    // 3x3/2 max pool.
    layers.push(LayerRecord {
        k: 3,
        stride: 2,
        padding: 1,
        ..LayerRecord::simple(LayerKind::Pool, 64)
    });

    let stages: [(usize, usize, usize, usize); 4] = [
        (64, 64, 256, 3),
        (256, 128, 512, 4),
        (512, 256, 1024, 6),
        (1024, 512, 2048, 3),
    ];
    for (stage_idx, &(c_in, mid, c_out, blocks)) in stages.iter().enumerate() {
        let stage_no = stage_idx + 1;
        let replace = replace_stages.contains(&stage_no);
        let entry_stride = if stage_no == 1 { 1 } else { 2 };
        let three_by_three = |stride: usize| -> LayerRecord {
            if replace && (stride == 1 || include_strided) {
                LayerRecord::arc_conv(mid, mid, 3, stride, 1, n)
            } else {
                LayerRecord::conv(mid, mid, 3, stride, 1)
            }
        };
        // Entry block with projection shortcut. The shortcut conv precedes
        // the strided 3x3 (it reads the stage input), its norm follows it
        // (it reads the downsampled map).
        layers.push(LayerRecord::conv(c_in, mid, 1, 1, 0));
        layers.push(LayerRecord::norm(mid));
        layers.push(LayerRecord::relu(mid));
        layers.push(LayerRecord {
            parallel: true,
            ..LayerRecord::conv(c_in, c_out, 1, entry_stride, 0)
        });
        layers.push(three_by_three(entry_stride));
        layers.push(LayerRecord {
            parallel: true,
            ..LayerRecord::norm(c_out)
        });
        layers.push(LayerRecord::norm(mid));
        layers.push(LayerRecord::relu(mid));
        layers.push(LayerRecord::conv(mid, c_out, 1, 1, 0));
        layers.push(LayerRecord::norm(c_out));
        layers.push(LayerRecord::relu(c_out));
        // Identity blocks, all alike.
        let rep = blocks - 1;
        if rep > 0 {
            for mut record in [
                LayerRecord::conv(c_out, mid, 1, 1, 0),
                LayerRecord::norm(mid),
                LayerRecord::relu(mid),
                three_by_three(1),
                LayerRecord::norm(mid),
                LayerRecord::relu(mid),
                LayerRecord::conv(mid, c_out, 1, 1, 0),
                LayerRecord::norm(c_out),
                LayerRecord::relu(c_out),
            ] {
                record.count = rep;
                layers.push(record);
            }
        }
    }
    let desc = NetworkDescriptor { layers };
    desc.validate_chain()?;
    Ok(desc)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn smallnet_static_params_match_hand_sum() {
        // stem 1*16*9 + norm 32
        // A: 2*(16*16*9 + 32)
        // B: (16*32*9 + 64) + (32*32*9 + 64)
        // C: (32*64*9 + 128) + (64*64*9 + 128)
        // head 64*8 + 8
        let want = 144
            + 32
            + 2 * (2304 + 32)
            + (4608 + 64)
            + (9216 + 64)
            + (18432 + 128)
            + (36864 + 128)
            + 520;
        let desc = smallnet_descriptor(StageSet::none(), 1, 8);
        desc.validate_chain().unwrap();
        assert_eq!(desc.params(), want as u64);
        assert_eq!(desc.params(), 74_872);
    }

    #[test]
    fn smallnet_arc_n1_adds_only_routers() {
        let static_params = smallnet_descriptor(StageSet::none(), 1, 8).params();
        let arc = smallnet_descriptor(StageSet::ALL, 1, 8);
        arc.validate_chain().unwrap();
        // Router at n=1 is 13*C_in + 1 per adaptive layer.
        let router_sum: u64 = [16, 16, 16, 32, 32, 64]
            .iter()
            .map(|&c| 13 * c as u64 + 1)
            .sum();
        assert_eq!(arc.params(), static_params + router_sum);
    }

    #[test]
    fn smallnet_arc_kernels_scale_linearly_in_n() {
        let p1 = smallnet_descriptor(StageSet::ALL, 1, 8).params();
        let p2 = smallnet_descriptor(StageSet::ALL, 2, 8).params();
        let p4 = smallnet_descriptor(StageSet::ALL, 4, 8).params();
        // Per extra expert: one copy of each replaced kernel plus the
        // per-expert head rows (2*C_in + 1 per layer).
        let replaced_kernels: u64 = 2 * 2304 + 4608 + 9216 + 18432 + 36864;
        let head_rows: u64 = [16, 16, 16, 32, 32, 64]
            .iter()
            .map(|&c| 2 * c as u64 + 1)
            .sum();
        assert_eq!(p2 - p1, replaced_kernels + head_rows);
        assert_eq!(p4 - p2, 2 * (replaced_kernels + head_rows));
    }

    #[test]
    fn resnet50_static_matches_reference_backbone() {
        // Torchvision resnet50 parameter count minus the fc head.
        let desc = resnet50_descriptor(&[], 1, true).unwrap();
        assert_eq!(desc.params(), 23_508_032);
    }

    #[test]
    fn resnet50_replacement_delta_per_added_kernel() {
        let p1 = resnet50_descriptor(&[2, 3, 4], 1, true).unwrap().params();
        let p2 = resnet50_descriptor(&[2, 3, 4], 2, true).unwrap().params();
        let p4 = resnet50_descriptor(&[2, 3, 4], 4, true).unwrap().params();
        // All 3x3 convs of stages 2-4 plus per-expert head rows.
        let kernels: u64 = 4 * (128 * 128 * 9) + 6 * (256 * 256 * 9) + 3 * (512 * 512 * 9);
        let heads: u64 = 4 * (2 * 128 + 1) + 6 * (2 * 256 + 1) + 3 * (2 * 512 + 1);
        assert_eq!(p2 - p1, kernels + heads);
        assert_eq!(p4 - p2, 2 * (kernels + heads));
        assert_eq!(kernels, 11_206_656);
    }

    #[test]
    fn resnet50_excluding_strided_replaces_fewer() {
        let with = resnet50_descriptor(&[2, 3, 4], 2, true).unwrap().params();
        let without = resnet50_descriptor(&[2, 3, 4], 2, false).unwrap().params();
        // One stage-entry 3x3 per stage reverts to a plain conv: it loses
        // the extra expert copy and its router (11c + 2nc + n at n=2).
        let extra_kernels: u64 = (128 * 128 + 256 * 256 + 512 * 512) * 9;
        let routers: u64 = [128u64, 256, 512].iter().map(|c| 15 * c + 2).sum();
        assert_eq!(with - without, extra_kernels + routers);
    }

    #[test]
    fn stage_set_parsing() {
        assert_eq!(StageSet::parse("a,b,c").unwrap(), StageSet::ALL);
        assert_eq!(
            StageSet::parse("C").unwrap(),
            StageSet {
                a: false,
                b: false,
                c: true
            }
        );
        assert_eq!(StageSet::parse("bc").unwrap().to_string(), "b,c");
        assert!(StageSet::parse("d").is_err());
        assert!(!StageSet::parse("").unwrap().any());
    }

    #[test]
    fn invalid_replacement_stage_rejected() {
        assert!(resnet50_descriptor(&[1], 2, true).is_err());
        assert!(resnet50_descriptor(&[5], 2, true).is_err());
    }

    #[test]
    fn spatial_walk_tracks_resnet_strides() {
        let desc = resnet50_descriptor(&[], 1, true).unwrap();
        let mut final_hw = (0, 0);
        walk_spatial(&desc, (1024, 1024), |l, _, out| {
            if !l.parallel {
                final_hw = out;
            }
        })
        .unwrap();
        assert_eq!(final_hw, (32, 32));
    }
}
