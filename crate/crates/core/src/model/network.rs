//! Two-stream embedding network plus matching head.
//!
//! Both streams share the same topology (stem, max pool, two bottleneck
//! stages) but have separate weights. The exemplar stream ends in a global
//! max pool, the image stream keeps its spatial grid; both outputs are L2
//! normalized over channels. The head concatenates the broadcast exemplar
//! vector with the image features, fuses them with a 3×3 conv, upsamples by
//! two with a transposed conv and predicts one channel.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use super::config::{channels, ModelConfig};
use super::params::{Grads, ParamId, ParamKind, ParamStore};
use crate::error::{Error, Result};
use crate::nn::{self, BatchStats, ConvGeom, NormCache};
use crate::tensor::{Elem, Tensor};

/// Feature stride of either stream.
pub const FEATURE_STRIDE: usize = 8;
const L2_EPS: f64 = 1e-12;
const UPSAMPLE_GEOM: ConvGeom = ConvGeom::new(2, 1);
const UPSAMPLE_OUTPUT_PAD: usize = 1;

/// NCHW shapes after each tabulated stage of one stream.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct StreamShapes {
    pub stem: [usize; 4],
    pub pool: [usize; 4],
    pub stage1: [usize; 4],
    pub stage2: [usize; 4],
}

/// NCHW shapes of one inference pass, stage by stage.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ShapeTrace {
    pub exemplar: StreamShapes,
    pub image: StreamShapes,
    pub exemplar_pooled: [usize; 4],
    pub broadcast: [usize; 4],
    pub concat: [usize; 4],
    pub relation: [usize; 4],
    pub output: [usize; 4],
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum StreamKind {
    Exemplar,
    Image,
}

impl StreamKind {
    pub fn name(&self) -> &'static str {
        match self {
            Self::Exemplar => "exemplar",
            Self::Image => "image",
        }
    }
}

#[derive(Clone, Debug)]
struct Conv {
    weight: ParamId,
    geom: ConvGeom,
}

#[derive(Clone, Debug)]
struct Norm {
    scale: ParamId,
    shift: ParamId,
    mean: ParamId,
    var: ParamId,
}

#[derive(Clone, Debug)]
struct Bottleneck {
    name: String,
    reduce: Conv,
    reduce_norm: Norm,
    spatial: Conv,
    /// 1×1 conv in parallel with `spatial`, summed before its normalization.
    adapter: Option<ParamId>,
    spatial_norm: Norm,
    expand: Conv,
    expand_norm: Norm,
    shortcut: Option<(Conv, Norm)>,
}

impl Bottleneck {
    fn adapter_geom(&self) -> ConvGeom {
        ConvGeom::new(self.spatial.geom.stride, 0)
    }
}

#[derive(Clone, Debug)]
struct Stream {
    stem: Conv,
    stem_norm: Norm,
    blocks: Vec<Bottleneck>,
}

#[derive(Clone, Debug)]
struct Head {
    fuse: Conv,
    fuse_norm: Norm,
    upsample: ParamId,
    upsample_norm: Norm,
    predict: Conv,
    predict_bias: ParamId,
}

/// The generic matching network.
#[derive(Clone, Debug)]
pub struct Gmn<E> {
    config: ModelConfig,
    params: ParamStore<E>,
    exemplar: Stream,
    image: Stream,
    head: Head,
}

struct Builder<'a, E> {
    store: &'a mut ParamStore<E>,
    rng: ChaCha8Rng,
}

impl<E: Elem> Builder<'_, E> {
    fn normal(&mut self, shape: [usize; 4], std: f64) -> Tensor<E> {
        let dist = Normal::new(0.0, std).expect("positive std");
        let n = shape.iter().product();
        let data = (0..n).map(|_| E::cst(dist.sample(&mut self.rng))).collect();
        Tensor::from_vec(shape, data).expect("shape")
    }

    fn conv(&mut self, name: &str, co: usize, ci: usize, k: usize, geom: ConvGeom) -> Conv {
        let w = self.normal([co, ci, k, k], (2.0 / (ci * k * k) as f64).sqrt());
        Conv {
            weight: self.store.add(format!("{name}.weight"), ParamKind::ConvWeight, w),
            geom,
        }
    }

    fn norm(&mut self, name: &str, c: usize) -> Norm {
        let s = [1, c, 1, 1];
        Norm {
            scale: self.store.add(format!("{name}.scale"), ParamKind::NormScale, Tensor::full(s, E::one())),
            shift: self.store.add(format!("{name}.shift"), ParamKind::NormShift, Tensor::zeros(s)),
            mean: self.store.add(format!("{name}.running_mean"), ParamKind::RunningMean, Tensor::zeros(s)),
            var: self.store.add(format!("{name}.running_var"), ParamKind::RunningVar, Tensor::full(s, E::one())),
        }
    }

    fn stream(&mut self, kind: StreamKind, cfg: &ModelConfig) -> Result<Stream> {
        let w = cfg.width;
        let p = kind.name();
        let stem_c = w.apply(channels::STEM)?;
        let stem = self.conv(&format!("{p}.stem.conv"), stem_c, 3, 7, ConvGeom::new(2, 3));
        let stem_norm = self.norm(&format!("{p}.stem.norm"), stem_c);
        let mut blocks = Vec::new();
        let mut cin = stem_c;
        let stages = [
            (1, channels::STAGE1_BLOCKS, channels::STAGE1_MID, channels::STAGE1_OUT, 1),
            (2, channels::STAGE2_BLOCKS, channels::STAGE2_MID, channels::STAGE2_OUT, 2),
        ];
        for (stage, count, mid, out, first_stride) in stages {
            let mid = w.apply(mid)?;
            let out = w.apply(out)?;
            for b in 0..count {
                let name = format!("{p}.stage{stage}.block{b}");
                let stride = if b == 0 { first_stride } else { 1 };
                let reduce = self.conv(&format!("{name}.reduce"), mid, cin, 1, ConvGeom::new(1, 0));
                let reduce_norm = self.norm(&format!("{name}.reduce_norm"), mid);
                let spatial = self.conv(&format!("{name}.spatial"), mid, mid, 3, ConvGeom::new(stride, 1));
                let spatial_norm = self.norm(&format!("{name}.spatial_norm"), mid);
                let expand = self.conv(&format!("{name}.expand"), out, mid, 1, ConvGeom::new(1, 0));
                let expand_norm = self.norm(&format!("{name}.expand_norm"), out);
                let shortcut = (b == 0).then(|| {
                    (
                        self.conv(&format!("{name}.shortcut"), out, cin, 1, ConvGeom::new(stride, 0)),
                        self.norm(&format!("{name}.shortcut_norm"), out),
                    )
                });
                blocks.push(Bottleneck {
                    name,
                    reduce,
                    reduce_norm,
                    spatial,
                    adapter: None,
                    spatial_norm,
                    expand,
                    expand_norm,
                    shortcut,
                });
                cin = out;
            }
        }
        Ok(Stream { stem, stem_norm, blocks })
    }

    fn head(&mut self, cfg: &ModelConfig) -> Result<Head> {
        let c = cfg.width.apply(channels::HEAD)?;
        let emb = cfg.embedding_dim();
        let fuse = self.conv("head.fuse", c, 2 * emb, 3, ConvGeom::new(1, 1));
        let fuse_norm = self.norm("head.fuse_norm", c);
        let up = self.normal([c, c, 3, 3], (2.0 / (c * 9) as f64).sqrt());
        let upsample = self.store.add("head.upsample.weight", ParamKind::ConvWeight, up);
        let upsample_norm = self.norm("head.upsample_norm", c);
        // small prediction weights keep the initial maps near zero
        let pw = self.normal([1, c, 3, 3], 0.01);
        let predict = Conv {
            weight: self.store.add("head.predict.weight", ParamKind::ConvWeight, pw),
            geom: ConvGeom::new(1, 1),
        };
        let predict_bias = self.store.add("head.predict.bias", ParamKind::ConvBias, Tensor::zeros([1, 1, 1, 1]));
        Ok(Head {
            fuse,
            fuse_norm,
            upsample,
            upsample_norm,
            predict,
            predict_bias,
        })
    }
}

/// Which parameters an optimizer may update.
#[derive(Clone, Copy, Debug, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TrainMode {
    /// Everything learnable except adapters.
    Pretrain,
    /// Adapters plus normalization scale/shift; conv weights frozen.
    Adapt,
}

#[derive(Clone, Debug)]
pub struct Partition {
    pub trainable: Vec<ParamId>,
    pub frozen: Vec<ParamId>,
    mask: Vec<bool>,
}

impl Partition {
    /// `mask[id]` is true when `id` is trainable.
    pub fn mask(&self) -> &[bool] {
        &self.mask
    }

    pub fn is_trainable(&self, id: ParamId) -> bool {
        self.mask[id.index()]
    }
}

/// Intermediate values of a training forward pass.
pub struct Tape<E> {
    exemplar: StreamCache<E>,
    exemplar_shape: [usize; 4],
    gmp_arg: Vec<u32>,
    v: Tensor<E>,
    v_norms: Vec<E>,
    image: StreamCache<E>,
    f: Tensor<E>,
    f_norms: Vec<E>,
    cat: Tensor<E>,
    fuse_cache: NormCache<E>,
    h1: Tensor<E>,
    up_cache: NormCache<E>,
    h2: Tensor<E>,
    stats: Vec<(Norm, BatchStats<E>)>,
}

impl<E> Tape<E> {
    /// Normalized exemplar embeddings `[n, c, 1, 1]`.
    pub fn exemplar_embedding(&self) -> &Tensor<E> {
        &self.v
    }
}

struct BlockCache<E> {
    x: Tensor<E>,
    reduce_cache: NormCache<E>,
    a: Tensor<E>,
    spatial_cache: NormCache<E>,
    b: Tensor<E>,
    expand_cache: NormCache<E>,
    shortcut_cache: Option<NormCache<E>>,
    out: Tensor<E>,
}

struct StreamCache<E> {
    input: Tensor<E>,
    stem_cache: NormCache<E>,
    stem_out: Tensor<E>,
    pool_arg: Vec<u32>,
    blocks: Vec<BlockCache<E>>,
}

struct Pass<'a, E> {
    p: &'a ParamStore<E>,
    train: bool,
    eps: E,
    stats: Vec<(Norm, BatchStats<E>)>,
}

impl<E: Elem> Pass<'_, E> {
    fn conv(&self, c: &Conv, x: &Tensor<E>) -> Tensor<E> {
        nn::conv2d(x, self.p.get(c.weight), None, c.geom)
    }

    fn norm(&mut self, n: &Norm, x: &Tensor<E>) -> (Tensor<E>, Option<NormCache<E>>) {
        let gamma = self.p.get(n.scale).data();
        let beta = self.p.get(n.shift).data();
        if self.train {
            let (y, cache, stats) = nn::batch_norm_train(x, gamma, beta, self.eps);
            self.stats.push((n.clone(), stats));
            (y, Some(cache))
        } else {
            let y = nn::batch_norm_eval(x, gamma, beta, self.p.get(n.mean).data(), self.p.get(n.var).data(), self.eps);
            (y, None)
        }
    }

    fn block(&mut self, blk: &Bottleneck, x: Tensor<E>) -> (Tensor<E>, Option<BlockCache<E>>) {
        let (mut a, reduce_cache) = self.norm(&blk.reduce_norm, &self.conv(&blk.reduce, &x));
        nn::relu_inplace(&mut a);
        let mut b_pre = self.conv(&blk.spatial, &a);
        if let Some(ad) = blk.adapter {
            b_pre.add_assign(&nn::conv2d(&a, self.p.get(ad), None, blk.adapter_geom()));
        }
        let (mut b, spatial_cache) = self.norm(&blk.spatial_norm, &b_pre);
        drop(b_pre);
        nn::relu_inplace(&mut b);
        let (mut out, expand_cache) = self.norm(&blk.expand_norm, &self.conv(&blk.expand, &b));
        let shortcut_cache = match &blk.shortcut {
            Some((conv, norm)) => {
                let (s, cache) = self.norm(norm, &self.conv(conv, &x));
                out.add_assign(&s);
                cache
            }
            None => {
                out.add_assign(&x);
                None
            }
        };
        nn::relu_inplace(&mut out);
        let cache = self.train.then(|| BlockCache {
            x,
            reduce_cache: reduce_cache.expect("train cache"),
            a,
            spatial_cache: spatial_cache.expect("train cache"),
            b,
            expand_cache: expand_cache.expect("train cache"),
            shortcut_cache,
            out: out.clone(),
        });
        (out, cache)
    }

    fn stream(&mut self, s: &Stream, x: Tensor<E>) -> (Tensor<E>, Option<StreamCache<E>>) {
        let (mut y, stem_cache) = self.norm(&s.stem_norm, &self.conv(&s.stem, &x));
        nn::relu_inplace(&mut y);
        let (mut h, pool_arg) = nn::max_pool2d(&y, 3, ConvGeom::new(2, 1));
        let mut blocks = Vec::new();
        for blk in &s.blocks {
            let (o, c) = self.block(blk, h);
            h = o;
            blocks.extend(c);
        }
        let cache = self.train.then(|| StreamCache {
            input: x,
            stem_cache: stem_cache.expect("train cache"),
            stem_out: y,
            pool_arg,
            blocks,
        });
        (h, cache)
    }

    fn stream_shapes(&mut self, s: &Stream, x: &Tensor<E>) -> (Tensor<E>, StreamShapes) {
        let (mut y, _) = self.norm(&s.stem_norm, &self.conv(&s.stem, x));
        nn::relu_inplace(&mut y);
        let (mut h, _) = nn::max_pool2d(&y, 3, ConvGeom::new(2, 1));
        let pool = h.shape();
        let mut stage1 = pool;
        for (i, blk) in s.blocks.iter().enumerate() {
            h = self.block(blk, h).0;
            if i + 1 == channels::STAGE1_BLOCKS {
                stage1 = h.shape();
            }
        }
        let shapes = StreamShapes { stem: y.shape(), pool, stage1, stage2: h.shape() };
        (h, shapes)
    }

    #[allow(clippy::type_complexity)]
    fn exemplar(&mut self, s: &Stream, x: Tensor<E>) -> (Tensor<E>, Vec<E>, [usize; 4], Vec<u32>, Option<StreamCache<E>>) {
        let (e, cache) = self.stream(s, x);
        let (g, arg) = nn::global_max_pool(&e);
        let (v, norms) = nn::l2_normalize_channels(&g, E::cst(L2_EPS));
        (v, norms, e.shape(), arg, cache)
    }

    fn image(&mut self, s: &Stream, x: Tensor<E>) -> (Tensor<E>, Vec<E>, Option<StreamCache<E>>) {
        let (e, cache) = self.stream(s, x);
        let (f, norms) = nn::l2_normalize_channels(&e, E::cst(L2_EPS));
        (f, norms, cache)
    }

    #[allow(clippy::type_complexity)]
    fn head(&mut self, h: &Head, v: &Tensor<E>, f: &Tensor<E>) -> (Tensor<E>, Option<(Tensor<E>, NormCache<E>, Tensor<E>, NormCache<E>, Tensor<E>)>) {
        let cat = nn::concat_broadcast(v, f);
        let (mut h1, fuse_cache) = self.norm(&h.fuse_norm, &self.conv(&h.fuse, &cat));
        nn::relu_inplace(&mut h1);
        let up = nn::conv_transpose2d(&h1, self.p.get(h.upsample), UPSAMPLE_GEOM, UPSAMPLE_OUTPUT_PAD);
        let (mut h2, up_cache) = self.norm(&h.upsample_norm, &up);
        drop(up);
        nn::relu_inplace(&mut h2);
        let y = nn::conv2d(&h2, self.p.get(h.predict.weight), Some(self.p.get(h.predict_bias)), h.predict.geom);
        let cache = match (fuse_cache, up_cache) {
            (Some(fc), Some(uc)) => Some((cat, fc, h1, uc, h2)),
            _ => None,
        };
        (y, cache)
    }
}

struct Back<'a, E> {
    p: &'a ParamStore<E>,
    mask: &'a [bool],
    grads: Grads<E>,
}

impl<E: Elem> Back<'_, E> {
    fn trainable(&self, id: ParamId) -> bool {
        self.mask[id.index()]
    }

    fn norm(&mut self, n: &Norm, dy: &Tensor<E>, cache: &NormCache<E>) -> Tensor<E> {
        let (dx, dg, db) = nn::batch_norm_backward(dy, cache, self.p.get(n.scale).data());
        let shape = [1, dg.len(), 1, 1];
        if self.trainable(n.scale) {
            self.grads.accumulate_vec(n.scale, shape, dg);
        }
        if self.trainable(n.shift) {
            self.grads.accumulate_vec(n.shift, shape, db);
        }
        dx
    }

    fn conv(&mut self, weight: ParamId, geom: ConvGeom, x: &Tensor<E>, dy: &Tensor<E>, want_dx: bool) -> Option<Tensor<E>> {
        let want_dw = self.trainable(weight);
        let (dx, dw) = nn::conv2d_backward(x, self.p.get(weight), dy, geom, want_dx, want_dw);
        if let Some(dw) = dw {
            self.grads.accumulate(weight, dw);
        }
        dx
    }

    fn block(&mut self, blk: &Bottleneck, c: &BlockCache<E>, mut d: Tensor<E>) -> Tensor<E> {
        nn::relu_backward_inplace(&mut d, &c.out);
        let mut dx = match (&blk.shortcut, &c.shortcut_cache) {
            (Some((conv, norm)), Some(cache)) => {
                let ds = self.norm(norm, &d, cache);
                self.conv(conv.weight, conv.geom, &c.x, &ds, true).expect("dx")
            }
            _ => d.clone(),
        };
        let d_expand = self.norm(&blk.expand_norm, &d, &c.expand_cache);
        let mut db = self.conv(blk.expand.weight, blk.expand.geom, &c.b, &d_expand, true).expect("dx");
        nn::relu_backward_inplace(&mut db, &c.b);
        let d_spatial = self.norm(&blk.spatial_norm, &db, &c.spatial_cache);
        let mut da = self.conv(blk.spatial.weight, blk.spatial.geom, &c.a, &d_spatial, true).expect("dx");
        if let Some(ad) = blk.adapter {
            da.add_assign(&self.conv(ad, blk.adapter_geom(), &c.a, &d_spatial, true).expect("dx"));
        }
        nn::relu_backward_inplace(&mut da, &c.a);
        let d_reduce = self.norm(&blk.reduce_norm, &da, &c.reduce_cache);
        dx.add_assign(&self.conv(blk.reduce.weight, blk.reduce.geom, &c.x, &d_reduce, true).expect("dx"));
        dx
    }

    fn stream(&mut self, s: &Stream, c: &StreamCache<E>, mut d: Tensor<E>) {
        for (blk, bc) in s.blocks.iter().zip(&c.blocks).rev() {
            d = self.block(blk, bc, d);
        }
        let mut dy = nn::max_pool_backward(&d, &c.pool_arg, c.stem_out.shape());
        nn::relu_backward_inplace(&mut dy, &c.stem_out);
        let d_stem = self.norm(&s.stem_norm, &dy, &c.stem_cache);
        self.conv(s.stem.weight, s.stem.geom, &c.input, &d_stem, false);
    }
}

impl<E: Elem> Gmn<E> {
    /// Fresh network with He-initialized convolutions and no adapters
    /// (adapters are inserted when `config.adapters_enabled`).
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        let mut params = ParamStore::default();
        let mut b = Builder {
            store: &mut params,
            rng: ChaCha8Rng::seed_from_u64(seed),
        };
        let exemplar = b.stream(StreamKind::Exemplar, &config)?;
        let image = b.stream(StreamKind::Image, &config)?;
        let head = b.head(&config)?;
        let wants_adapters = config.adapters_enabled;
        let mut net = Self {
            config: ModelConfig {
                adapters_enabled: false,
                ..config
            },
            params,
            exemplar,
            image,
            head,
        };
        if wants_adapters {
            net.insert_adapters()?;
        }
        Ok(net)
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn params(&self) -> &ParamStore<E> {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamStore<E> {
        &mut self.params
    }

    pub fn embedding_dim(&self) -> usize {
        self.config.embedding_dim()
    }

    pub fn num_parameters(&self) -> usize {
        self.params.num_parameters()
    }

    /// Number of residual-adapter sites (one per 3×3 conv in every residual block of both streams).
    pub fn adapter_sites(&self) -> usize {
        self.exemplar.blocks.len() + self.image.blocks.len()
    }

    pub fn adapter_ids(&self) -> Vec<ParamId> {
        self.exemplar
            .blocks
            .iter()
            .chain(&self.image.blocks)
            .filter_map(|b| b.adapter)
            .collect()
    }

    /// Adds a zero-initialized 1×1 adapter next to every residual 3×3 conv.
    /// The network function is unchanged until the adapters are trained.
    pub fn insert_adapters(&mut self) -> Result<()> {
        if self.config.adapters_enabled {
            return Err(Error::AdaptersPresent);
        }
        for blk in self.exemplar.blocks.iter_mut().chain(self.image.blocks.iter_mut()) {
            let c = self.params.get(blk.spatial.weight).n();
            let id = self.params.add(
                format!("{}.spatial.adapter.weight", blk.name),
                ParamKind::AdapterWeight,
                Tensor::zeros([c, c, 1, 1]),
            );
            blk.adapter = Some(id);
        }
        self.config.adapters_enabled = true;
        Ok(())
    }

    pub fn partition(&self, mode: TrainMode) -> Result<Partition> {
        if mode == TrainMode::Adapt && !self.config.adapters_enabled {
            return Err(Error::AdaptersMissing);
        }
        let mut mask = vec![false; self.params.len()];
        let (mut trainable, mut frozen) = (Vec::new(), Vec::new());
        for id in self.params.ids() {
            let kind = self.params.info(id).kind;
            if kind.is_buffer() {
                continue;
            }
            let t = match mode {
                TrainMode::Pretrain => kind != ParamKind::AdapterWeight,
                TrainMode::Adapt => kind == ParamKind::AdapterWeight || kind.is_norm_affine(),
            };
            mask[id.index()] = t;
            if t {
                trainable.push(id);
            } else {
                frozen.push(id);
            }
        }
        Ok(Partition { trainable, frozen, mask })
    }

    fn pass(&self, train: bool) -> Pass<'_, E> {
        Pass {
            p: &self.params,
            train,
            eps: E::cst(self.config.norm_eps),
            stats: Vec::new(),
        }
    }

    fn check_images(images: &Tensor<E>) -> Result<()> {
        let [_, c, h, w] = images.shape();
        if c != 3 || h == 0 || w == 0 || h % FEATURE_STRIDE != 0 || w % FEATURE_STRIDE != 0 {
            return Err(Error::Shape(format!(
                "image batch {:?} must be RGB with sides divisible by {FEATURE_STRIDE}",
                images.shape()
            )));
        }
        Ok(())
    }

    fn check_patches(patches: &Tensor<E>) -> Result<()> {
        let [_, c, h, w] = patches.shape();
        if c != 3 || h < FEATURE_STRIDE || w < FEATURE_STRIDE {
            return Err(Error::Shape(format!("exemplar batch {:?} must be RGB and at least 8×8", patches.shape())));
        }
        Ok(())
    }

    /// Unit-norm exemplar embeddings `[n, C, 1, 1]` (inference statistics).
    pub fn embed_exemplar(&self, patches: &Tensor<E>) -> Result<Tensor<E>> {
        Self::check_patches(patches)?;
        Ok(self.pass(false).exemplar(&self.exemplar, patches.clone()).0)
    }

    /// Per-position unit-norm image features `[n, C, h/8, w/8]`.
    pub fn embed_image(&self, images: &Tensor<E>) -> Result<Tensor<E>> {
        Self::check_images(images)?;
        Ok(self.pass(false).image(&self.image, images.clone()).0)
    }

    /// Similarity maps `[n, 1, 2·hf, 2·wf]` from precomputed embeddings.
    pub fn match_embeddings(&self, v: &Tensor<E>, f: &Tensor<E>) -> Result<Tensor<E>> {
        let emb = self.embedding_dim();
        if v.shape() != [f.n(), emb, 1, 1] || f.c() != emb {
            return Err(Error::Shape(format!("embeddings {:?} and {:?} do not match", v.shape(), f.shape())));
        }
        Ok(self.pass(false).head(&self.head, v, f).0)
    }

    /// Runs an inference pass and reports the shape after every stage.
    pub fn trace_shapes(&self, images: &Tensor<E>, patches: &Tensor<E>) -> Result<ShapeTrace> {
        Self::check_images(images)?;
        Self::check_patches(patches)?;
        if images.n() != patches.n() {
            return Err(Error::Shape(format!("{} images vs {} exemplars", images.n(), patches.n())));
        }
        let mut pass = self.pass(false);
        let (e, exemplar) = pass.stream_shapes(&self.exemplar, patches);
        let (g, _) = nn::global_max_pool(&e);
        let (v, _) = nn::l2_normalize_channels(&g, E::cst(L2_EPS));
        let (fe, image) = pass.stream_shapes(&self.image, images);
        let (f, _) = nn::l2_normalize_channels(&fe, E::cst(L2_EPS));
        let h = &self.head;
        let cat = nn::concat_broadcast(&v, &f);
        let (mut h1, _) = pass.norm(&h.fuse_norm, &pass.conv(&h.fuse, &cat));
        nn::relu_inplace(&mut h1);
        let up = nn::conv_transpose2d(&h1, self.params.get(h.upsample), UPSAMPLE_GEOM, UPSAMPLE_OUTPUT_PAD);
        let (mut h2, _) = pass.norm(&h.upsample_norm, &up);
        nn::relu_inplace(&mut h2);
        let y = nn::conv2d(&h2, self.params.get(h.predict.weight), Some(self.params.get(h.predict_bias)), h.predict.geom);
        Ok(ShapeTrace {
            exemplar,
            image,
            exemplar_pooled: v.shape(),
            broadcast: [v.n(), v.c(), f.h(), f.w()],
            concat: cat.shape(),
            relation: h2.shape(),
            output: y.shape(),
        })
    }

    /// Inference forward pass. `images` and `patches` must have equal batch size.
    pub fn forward(&self, images: &Tensor<E>, patches: &Tensor<E>) -> Result<Tensor<E>> {
        let v = self.embed_exemplar(patches)?;
        let f = self.embed_image(images)?;
        self.match_embeddings(&v, &f)
    }

    /// Training forward pass using batch statistics; the tape feeds [`Gmn::backward`].
    pub fn forward_train(&self, images: &Tensor<E>, patches: &Tensor<E>) -> Result<(Tensor<E>, Tape<E>)> {
        Self::check_images(images)?;
        Self::check_patches(patches)?;
        if images.n() != patches.n() {
            return Err(Error::Shape(format!("{} images vs {} exemplars", images.n(), patches.n())));
        }
        let mut pass = self.pass(true);
        let (v, v_norms, exemplar_shape, gmp_arg, ec) = pass.exemplar(&self.exemplar, patches.clone());
        let (f, f_norms, ic) = pass.image(&self.image, images.clone());
        let (y, hc) = pass.head(&self.head, &v, &f);
        let (cat, fuse_cache, h1, up_cache, h2) = hc.expect("train cache");
        let tape = Tape {
            exemplar: ec.expect("train cache"),
            exemplar_shape,
            gmp_arg,
            v,
            v_norms,
            image: ic.expect("train cache"),
            f,
            f_norms,
            cat,
            fuse_cache,
            h1,
            up_cache,
            h2,
            stats: pass.stats,
        };
        Ok((y, tape))
    }

    /// Gradients of a scalar loss given `dmap = ∂loss/∂output`. Only
    /// parameters with `mask[id] == true` receive gradients.
    pub fn backward(&self, tape: &Tape<E>, dmap: &Tensor<E>, mask: &[bool]) -> Grads<E> {
        assert_eq!(mask.len(), self.params.len(), "mask length");
        let mut back = Back {
            p: &self.params,
            mask,
            grads: Grads::new(self.params.len()),
        };
        let h = &self.head;
        if back.trainable(h.predict_bias) {
            back.grads.accumulate(h.predict_bias, nn::channel_sums(dmap));
        }
        let mut d = back.conv(h.predict.weight, h.predict.geom, &tape.h2, dmap, true).expect("dx");
        nn::relu_backward_inplace(&mut d, &tape.h2);
        let d = back.norm(&h.upsample_norm, &d, &tape.up_cache);
        let want_up = back.trainable(h.upsample);
        let (mut d, dw) = nn::conv_transpose2d_backward(&tape.h1, self.params.get(h.upsample), &d, UPSAMPLE_GEOM, want_up);
        if let Some(dw) = dw {
            back.grads.accumulate(h.upsample, dw);
        }
        nn::relu_backward_inplace(&mut d, &tape.h1);
        let d = back.norm(&h.fuse_norm, &d, &tape.fuse_cache);
        let dcat = back.conv(h.fuse.weight, h.fuse.geom, &tape.cat, &d, true).expect("dx");
        let (dv, df) = nn::concat_broadcast_backward(&dcat, self.embedding_dim());
        drop(dcat);

        let df = nn::l2_normalize_backward(&df, &tape.f, &tape.f_norms);
        back.stream(&self.image, &tape.image, df);

        let dg = nn::l2_normalize_backward(&dv, &tape.v, &tape.v_norms);
        let de = nn::max_pool_backward(&dg, &tape.gmp_arg, tape.exemplar_shape);
        back.stream(&self.exemplar, &tape.exemplar, de);
        back.grads
    }

    /// Folds the batch statistics of a training pass into the running estimates.
    pub fn commit_norm_statistics(&mut self, tape: &Tape<E>) {
        let m = E::cst(self.config.norm_momentum);
        let keep = E::one() - m;
        for (norm, stats) in &tape.stats {
            for (id, batch) in [(norm.mean, &stats.mean), (norm.var, &stats.var)] {
                for (r, b) in self.params.get_mut(id).data_mut().iter_mut().zip(batch.iter()) {
                    *r = keep * *r + m * *b;
                }
            }
        }
    }

    pub fn cast<F: Elem>(&self) -> Gmn<F> {
        Gmn {
            config: self.config.clone(),
            params: self.params.cast(),
            exemplar: self.exemplar.clone(),
            image: self.image.clone(),
            head: self.head.clone(),
        }
    }
}
