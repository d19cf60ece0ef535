use rand::Rng;
use serde::{Deserialize, Serialize};

use super::config::{FeaturePath, RmglConfig};
use crate::partition::{
    abp_boundaries, max_activation_histogram, merge_partition, pool_stripes, receptive_partition, PooledStripes,
    StripeBoundaries, StripePool,
};
use crate::receptive::{ArchKind, ArchSpec, PartitionPlan};
use crate::tensor::{
    global_max_pool, global_max_pool_backward, BatchNorm, Conv2d, Layer, Linear, Mode, Pool2d, PoolKind, Sequential,
    SequentialCache, Shape, Tensor,
};
use crate::{Error, Result};

pub const INPUT_CHANNELS: usize = 3;

/// Identifies one reduced feature vector.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct HeadKey {
    pub branch: usize,
    pub path: FeaturePath,
    /// 0 is the global head, `1..=K` the stripes from top to bottom.
    pub stripe: usize,
}

impl std::fmt::Display for HeadKey {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "b{}/{}/s{}", self.branch, self.path.as_str(), self.stripe)
    }
}

/// Learning-rate group of a parameter tensor.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ParamGroup {
    Backbone,
    /// Reduction and classifier layers.
    Head,
}

/// Reduction (`1x1` map + batchnorm) followed by a classifier.
#[derive(Clone, Debug, PartialEq)]
pub struct Head {
    pub embed: Sequential,
    pub classifier: Linear,
}

impl Head {
    fn new<R: Rng + ?Sized>(channels: usize, dim: usize, classes: usize, rng: &mut R) -> Self {
        let mut reduce = Linear::new(channels, dim, false);
        reduce.init_kaiming(rng);
        let mut classifier = Linear::new(dim, classes, true);
        classifier.init_uniform(1.0 / (dim as f64).sqrt(), rng);
        Self {
            embed: Sequential::new(vec![Layer::Linear(reduce), Layer::BatchNorm(BatchNorm::new(dim))]),
            classifier,
        }
    }

    fn groups(&self) -> Vec<ParamGroup> {
        // reduce.weight, bn.gamma, bn.beta, classifier.weight, classifier.bias
        let mut g = vec![ParamGroup::Head, ParamGroup::Backbone, ParamGroup::Backbone, ParamGroup::Head];
        if self.classifier.bias.is_some() {
            g.push(ParamGroup::Head);
        }
        g
    }

    fn params(&self) -> Vec<&Tensor> {
        let mut p = self.embed.params();
        p.push(&self.classifier.weight);
        p.extend(self.classifier.bias.as_ref());
        p
    }

    fn params_mut(&mut self) -> Vec<&mut Tensor> {
        let mut p = self.embed.params_mut();
        p.push(&mut self.classifier.weight);
        p.extend(self.classifier.bias.as_mut());
        p
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Branch {
    pub stripes: usize,
    /// Layers between the branch split and the receptive partition.
    pub pre: Sequential,
    /// Layers after the partition, shared by both paths.
    pub post: Sequential,
    /// Heads ordered path-major, stripe-minor, over the enabled paths.
    pub heads: Vec<Head>,
}

/// The multi-branch network.
#[derive(Clone, Debug, PartialEq)]
pub struct Model {
    config: RmglConfig,
    arch: ArchSpec,
    plans: Vec<PartitionPlan>,
    pub stem: Sequential,
    pub branches: Vec<Branch>,
}

/// Reduced vectors and classifier scores of every head, in head order.
#[derive(Clone, Debug)]
pub struct FeatureBundle {
    pub batch: usize,
    pub dim: usize,
    pub keys: Vec<HeadKey>,
    /// `(n, dim, 1, 1)` per head.
    pub features: Vec<Tensor>,
    /// `(n, classes, 1, 1)` per head.
    pub scores: Vec<Tensor>,
}

impl FeatureBundle {
    pub fn head_count(&self) -> usize {
        self.keys.len()
    }

    pub fn get(&self, key: HeadKey) -> Option<&Tensor> {
        self.keys.iter().position(|k| *k == key).map(|i| &self.features[i])
    }

    fn concat(&self, heads: &[usize]) -> Tensor {
        let width = heads.len() * self.dim;
        let mut data = Vec::with_capacity(self.batch * width);
        for n in 0..self.batch {
            for &h in heads {
                data.extend_from_slice(self.features[h].sample(n));
            }
        }
        Tensor::from_vec(Shape::new(self.batch, width, 1, 1), data).expect("consistent head shapes")
    }

    /// Channel concatenation of every head: `(n, heads * dim, 1, 1)`.
    pub fn concatenated(&self) -> Tensor {
        self.concat(&(0..self.keys.len()).collect::<Vec<_>>())
    }

    pub fn branch_heads(&self, branch: usize) -> Vec<usize> {
        (0..self.keys.len()).filter(|&i| self.keys[i].branch == branch).collect()
    }

    /// Concatenation of one branch's heads.
    pub fn branch_concat(&self, branch: usize) -> Tensor {
        self.concat(&self.branch_heads(branch))
    }

    pub fn branches(&self) -> usize {
        self.keys.iter().map(|k| k.branch + 1).max().unwrap_or(0)
    }
}

/// Loss gradients with respect to every head's vector and scores.
#[derive(Clone, Debug)]
pub struct BundleGrad {
    pub features: Vec<Tensor>,
    pub scores: Vec<Tensor>,
}

#[derive(Clone, Debug)]
struct HeadCache {
    embed: SequentialCache,
    feature: Tensor,
}

#[derive(Clone, Debug)]
struct PathCache {
    path: FeaturePath,
    post: SequentialCache,
    map_shape: Shape,
    global_argmax: Vec<usize>,
    pooled: PooledStripes,
    heads: Vec<HeadCache>,
}

#[derive(Clone, Debug)]
struct BranchCache {
    pre: SequentialCache,
    paths: Vec<PathCache>,
}

/// Intermediate values needed by [`Model::backward`].
#[derive(Clone, Debug)]
pub struct ForwardCache {
    mode: Mode,
    stem: SequentialCache,
    branches: Vec<BranchCache>,
}

fn build_chain<R: Rng + ?Sized>(
    arch: &ArchSpec,
    range: std::ops::Range<usize>,
    channels: &[usize],
    rng: &mut R,
) -> Result<Sequential> {
    let mut layers = Vec::new();
    for i in range {
        let l = &arch.layers()[i];
        let k = (l.kernel.h, l.kernel.w);
        let s = (l.stride.h, l.stride.w);
        let p = (l.padding.h, l.padding.w);
        match l.kind {
            ArchKind::Conv => {
                let mut conv = Conv2d::new(channels[i], channels[i + 1], k, s, p, false)?;
                conv.init_kaiming(rng);
                layers.push(Layer::Conv(conv));
                layers.push(Layer::BatchNorm(BatchNorm::new(channels[i + 1])));
                layers.push(Layer::Relu);
            }
            ArchKind::MaxPool => layers.push(Layer::Pool(Pool2d::new(PoolKind::Max, k, s, p)?)),
            ArchKind::AvgPool => layers.push(Layer::Pool(Pool2d::new(PoolKind::Avg, k, s, p)?)),
            ArchKind::BatchNorm | ArchKind::Relu => {
                return Err(Error::Config(format!("layer {}: unsupported in model backbones", l.name)))
            }
        }
    }
    Ok(Sequential::new(layers))
}

/// Builds the network with freshly initialised parameters.
pub fn build_model<R: Rng + ?Sized>(config: &RmglConfig, rng: &mut R) -> Result<Model> {
    build_model_with_arch(config, config.arch()?, rng)
}

/// [`build_model`] with an explicit backbone instead of `config.backbone`.
pub fn build_model_with_arch<R: Rng + ?Sized>(config: &RmglConfig, arch: ArchSpec, rng: &mut R) -> Result<Model> {
    let plans = config.validate_with(&arch)?;
    // Channel count of every map.
    let mut channels = vec![INPUT_CHANNELS];
    let mut conv = config.channels.iter();
    for l in arch.layers() {
        let prev = *channels.last().expect("non-empty");
        channels.push(match l.kind {
            ArchKind::Conv => *conv.next().expect("validated channel count"),
            _ => prev,
        });
    }
    let depth = arch.depth();
    let stem = build_chain(&arch, 0..config.branch_split, &channels, rng)?;
    let paths = config.paths().len();
    let mut branches = Vec::new();
    for (b, &k) in config.stripes.iter().enumerate() {
        let j = config.rp_split_of(b);
        let pre = build_chain(&arch, config.branch_split..j, &channels, rng)?;
        let post = build_chain(&arch, j..depth, &channels, rng)?;
        let heads = (0..paths * (1 + k))
            .map(|_| Head::new(channels[depth], config.feature_dim, config.classes, rng))
            .collect();
        branches.push(Branch {
            stripes: k,
            pre,
            post,
            heads,
        });
    }
    Ok(Model {
        config: config.clone(),
        arch,
        plans,
        stem,
        branches,
    })
}

impl Model {
    pub fn config(&self) -> &RmglConfig {
        &self.config
    }

    pub fn arch(&self) -> &ArchSpec {
        &self.arch
    }

    /// Receptive partition plan of each branch.
    pub fn plans(&self) -> &[PartitionPlan] {
        &self.plans
    }

    pub fn head_keys(&self) -> Vec<HeadKey> {
        let mut keys = Vec::new();
        for (b, br) in self.branches.iter().enumerate() {
            for path in self.config.paths() {
                for stripe in 0..=br.stripes {
                    keys.push(HeadKey { branch: b, path, stripe });
                }
            }
        }
        keys
    }

    /// Length of the concatenated feature.
    pub fn feature_len(&self) -> usize {
        self.head_keys().len() * self.config.feature_dim
    }

    pub fn params(&self) -> Vec<&Tensor> {
        let mut p = self.stem.params();
        for br in &self.branches {
            p.extend(br.pre.params());
            p.extend(br.post.params());
            for h in &br.heads {
                p.extend(h.params());
            }
        }
        p
    }

    pub fn params_mut(&mut self) -> Vec<&mut Tensor> {
        let mut p = self.stem.params_mut();
        for br in &mut self.branches {
            p.extend(br.pre.params_mut());
            p.extend(br.post.params_mut());
            for h in &mut br.heads {
                p.extend(h.params_mut());
            }
        }
        p
    }

    /// Learning-rate group of each tensor in [`Model::params`] order.
    pub fn param_groups(&self) -> Vec<ParamGroup> {
        let mut g = vec![ParamGroup::Backbone; self.stem.params().len()];
        for br in &self.branches {
            g.extend(vec![ParamGroup::Backbone; br.pre.params().len() + br.post.params().len()]);
            for h in &br.heads {
                g.extend(h.groups());
            }
        }
        g
    }

    /// Names of the tensors in [`Model::params`] order.
    pub fn param_names(&self) -> Vec<String> {
        fn seq(prefix: &str, s: &Sequential, out: &mut Vec<String>) {
            for (i, l) in s.layers.iter().enumerate() {
                let names: &[&str] = match l {
                    Layer::Conv(c) if c.bias.is_some() => &["weight", "bias"],
                    Layer::Conv(_) => &["weight"],
                    Layer::BatchNorm(_) => &["gamma", "beta"],
                    Layer::Linear(l) if l.bias.is_some() => &["weight", "bias"],
                    Layer::Linear(_) => &["weight"],
                    _ => &[],
                };
                out.extend(names.iter().map(|n| format!("{prefix}.{i}.{n}")));
            }
        }
        let mut out = Vec::new();
        seq("stem", &self.stem, &mut out);
        let keys = self.head_keys();
        let mut key = keys.iter();
        for (b, br) in self.branches.iter().enumerate() {
            seq(&format!("branch{b}.pre"), &br.pre, &mut out);
            seq(&format!("branch{b}.post"), &br.post, &mut out);
            for h in &br.heads {
                let k = key.next().expect("one key per head");
                let prefix = format!("head.{}.{}.{}", k.branch, k.path.as_str(), k.stripe);
                seq(&format!("{prefix}.embed"), &h.embed, &mut out);
                out.push(format!("{prefix}.classifier.weight"));
                if h.classifier.bias.is_some() {
                    out.push(format!("{prefix}.classifier.bias"));
                }
            }
        }
        out
    }

    pub fn buffers(&self) -> Vec<&Tensor> {
        let mut p = self.stem.buffers();
        for br in &self.branches {
            p.extend(br.pre.buffers());
            p.extend(br.post.buffers());
            for h in &br.heads {
                p.extend(h.embed.buffers());
            }
        }
        p
    }

    pub fn buffers_mut(&mut self) -> Vec<&mut Tensor> {
        let mut p = self.stem.buffers_mut();
        for br in &mut self.branches {
            p.extend(br.pre.buffers_mut());
            p.extend(br.post.buffers_mut());
            for h in &mut br.heads {
                p.extend(h.embed.buffers_mut());
            }
        }
        p
    }

    pub fn num_params(&self) -> usize {
        self.params().iter().map(|t| t.len()).sum()
    }

    /// Parameters owned by one branch, heads included.
    pub fn branch_params(&self, branch: usize) -> usize {
        let br = &self.branches[branch];
        let heads: usize = br.heads.iter().flat_map(Head::params).map(Tensor::len).sum();
        br.pre.num_params() + br.post.num_params() + heads
    }

    fn check_input(&self, x: &Tensor) -> Result<()> {
        let s = x.shape();
        let want = self.arch.input();
        for (dim, expected, actual) in [("c", INPUT_CHANNELS, s.c), ("h", want.h, s.h), ("w", want.w, s.w)] {
            if expected != actual {
                return Err(Error::Shape {
                    op: "forward_features",
                    dim,
                    expected,
                    actual,
                });
            }
        }
        if s.n == 0 {
            return Err(Error::InvalidShape {
                op: "forward_features",
                reason: "empty batch".into(),
            });
        }
        Ok(())
    }

    fn path_map(&self, b: usize, path: FeaturePath, p: &Tensor, mode: Mode) -> Result<(Tensor, SequentialCache)> {
        let br = &self.branches[b];
        match path {
            FeaturePath::Original => br.post.forward(p, mode),
            FeaturePath::Rp => {
                let parts = receptive_partition(p, br.stripes)?;
                let (out, cache) = br.post.forward(&parts, mode)?;
                Ok((merge_partition(&out, br.stripes)?, cache))
            }
        }
    }

    /// Stripe boundaries and pooling used for the heads of one path.
    pub fn stripe_bounds(
        &self,
        b: usize,
        path: FeaturePath,
        map: &Tensor,
        mode: Mode,
    ) -> Result<(Vec<StripeBoundaries>, StripePool)> {
        let k = self.branches[b].stripes;
        let s = map.shape();
        if path == FeaturePath::Original && mode == Mode::Eval && self.config.abp_eval {
            let bounds = (0..s.n)
                .map(|i| abp_boundaries(&max_activation_histogram(&map.sample_tensor(i))?, k))
                .collect::<Result<_>>()?;
            return Ok((bounds, self.config.abp_pool));
        }
        Ok((vec![StripeBoundaries::uniform(s.h, k)?], self.config.stripe_pool))
    }

    /// Runs the network and keeps what [`Model::backward`] needs.
    pub fn forward(&self, x: &Tensor, mode: Mode) -> Result<(FeatureBundle, ForwardCache)> {
        self.check_input(x)?;
        let (m, stem_cache) = self.stem.forward(x, mode)?;
        let mut keys = Vec::new();
        let mut features = Vec::new();
        let mut scores = Vec::new();
        let mut branch_caches = Vec::new();
        for (b, br) in self.branches.iter().enumerate() {
            let (p, pre_cache) = br.pre.forward(&m, mode)?;
            let mut path_caches = Vec::new();
            let mut heads = br.heads.iter();
            for path in self.config.paths() {
                let (map, post_cache) = self.path_map(b, path, &p, mode)?;
                let (global, global_argmax) = global_max_pool(&map)?;
                let (bounds, kind) = self.stripe_bounds(b, path, &map, mode)?;
                let pooled = pool_stripes(&map, &bounds, kind)?;
                let mut head_caches = Vec::new();
                for (stripe, v) in std::iter::once(&global).chain(&pooled.stripes).enumerate() {
                    let head = heads.next().expect("one head per stripe and path");
                    let (f, embed) = head.embed.forward(v, mode)?;
                    scores.push(crate::tensor::linear(&f, &head.classifier)?);
                    keys.push(HeadKey { branch: b, path, stripe });
                    features.push(f.clone());
                    head_caches.push(HeadCache { embed, feature: f });
                }
                path_caches.push(PathCache {
                    path,
                    post: post_cache,
                    map_shape: map.shape(),
                    global_argmax,
                    pooled,
                    heads: head_caches,
                });
            }
            branch_caches.push(BranchCache {
                pre: pre_cache,
                paths: path_caches,
            });
        }
        let bundle = FeatureBundle {
            batch: x.shape().n,
            dim: self.config.feature_dim,
            keys,
            features,
            scores,
        };
        let cache = ForwardCache {
            mode,
            stem: stem_cache,
            branches: branch_caches,
        };
        Ok((bundle, cache))
    }

    pub fn forward_features(&self, x: &Tensor, mode: Mode) -> Result<FeatureBundle> {
        Ok(self.forward(x, mode)?.0)
    }

    /// Concatenated eval-mode features, `(n, feature_len, 1, 1)`.
    pub fn embed(&self, x: &Tensor) -> Result<Tensor> {
        Ok(self.forward_features(x, Mode::Eval)?.concatenated())
    }

    /// Final feature map of every enabled path (the partitioned path merged
    /// back along the height), ordered like the heads.
    pub fn final_maps(&self, x: &Tensor, mode: Mode) -> Result<Vec<(usize, FeaturePath, Tensor)>> {
        self.check_input(x)?;
        let m = self.stem.apply(x, mode)?;
        let mut out = Vec::new();
        for (b, br) in self.branches.iter().enumerate() {
            let p = br.pre.apply(&m, mode)?;
            for path in self.config.paths() {
                out.push((b, path, self.path_map(b, path, &p, mode)?.0));
            }
        }
        Ok(out)
    }

    /// Final maps before the last activation, eval mode.
    pub fn response_maps(&self, x: &Tensor) -> Result<Vec<(usize, FeaturePath, Tensor)>> {
        let mut trimmed = self.clone();
        for br in &mut trimmed.branches {
            if matches!(br.post.layers.last(), Some(Layer::Relu)) {
                br.post.layers.pop();
            }
        }
        trimmed.final_maps(x, Mode::Eval)
    }

    /// Parameter gradients in [`Model::params`] order.
    pub fn backward(&self, cache: &ForwardCache, grad: &BundleGrad) -> Result<Vec<Tensor>> {
        let heads = self.head_keys().len();
        if grad.features.len() != heads || grad.scores.len() != heads {
            return Err(Error::Shape {
                op: "backward",
                dim: "heads",
                expected: heads,
                actual: grad.features.len(),
            });
        }
        let mut head_index = 0;
        let mut grad_m: Option<Tensor> = None;
        let mut branch_grads = Vec::new();
        for (b, br) in self.branches.iter().enumerate() {
            let bc = &cache.branches[b];
            let mut grad_p: Option<Tensor> = None;
            let mut post_grads: Option<Vec<Tensor>> = None;
            let mut head_grads = Vec::new();
            for pc in &bc.paths {
                let mut pooled_grads = Vec::new();
                for hc in &pc.heads {
                    let head = &br.heads[head_grads.len()];
                    let (gf_cls, gcw, gcb) =
                        crate::tensor::linear_backward(&hc.feature, &head.classifier, &grad.scores[head_index])?;
                    let mut gf = grad.features[head_index].clone().reshape(gf_cls.shape())?;
                    gf.add_assign(&gf_cls)?;
                    let (gv, mut gp) = head.embed.backward(&hc.embed, &gf)?;
                    gp.push(gcw);
                    gp.extend(gcb);
                    head_grads.push(gp);
                    pooled_grads.push(gv);
                    head_index += 1;
                }
                let mut gmap = global_max_pool_backward(pc.map_shape, &pc.global_argmax, &pooled_grads[0])?;
                gmap.add_assign(&pc.pooled.backward(&pooled_grads[1..])?)?;
                let gout = match pc.path {
                    FeaturePath::Original => gmap,
                    FeaturePath::Rp => receptive_partition(&gmap, br.stripes)?,
                };
                let (gin, gpost) = br.post.backward(&pc.post, &gout)?;
                let gin = match pc.path {
                    FeaturePath::Original => gin,
                    FeaturePath::Rp => merge_partition(&gin, br.stripes)?,
                };
                accumulate(&mut grad_p, gin)?;
                match &mut post_grads {
                    None => post_grads = Some(gpost),
                    Some(acc) => {
                        for (a, g) in acc.iter_mut().zip(&gpost) {
                            a.add_assign(g)?;
                        }
                    }
                }
            }
            let grad_p = grad_p.expect("at least one path");
            let (gm, gpre) = br.pre.backward(&bc.pre, &grad_p)?;
            accumulate(&mut grad_m, gm)?;
            let mut g = gpre;
            g.extend(post_grads.expect("at least one path"));
            g.extend(head_grads.into_iter().flatten());
            branch_grads.push(g);
        }
        let (_, mut grads) = self.stem.backward(&cache.stem, &grad_m.expect("at least one branch"))?;
        grads.extend(branch_grads.into_iter().flatten());
        Ok(grads)
    }

    /// Folds batch statistics from a training-mode forward into the running
    /// estimates; the shared layers are updated once per path.
    pub fn update_running(&mut self, cache: &ForwardCache) {
        if cache.mode != Mode::Train {
            return;
        }
        self.stem.update_running(&cache.stem);
        for (br, bc) in self.branches.iter_mut().zip(&cache.branches) {
            br.pre.update_running(&bc.pre);
            let mut head = 0;
            for pc in &bc.paths {
                br.post.update_running(&pc.post);
                for hc in &pc.heads {
                    br.heads[head].embed.update_running(&hc.embed);
                    head += 1;
                }
            }
        }
    }
}

fn accumulate(acc: &mut Option<Tensor>, g: Tensor) -> Result<()> {
    match acc {
        None => *acc = Some(g),
        Some(a) => a.add_assign(&g)?,
    }
    Ok(())
}
