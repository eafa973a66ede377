//! Patch embedding and a small pre-norm vision transformer whose per-layer
//! outputs are tapped read-only by the decoders.

use crate::error::{Error, Result};
use crate::numerics::params::{uniform, xavier_uniform};
use crate::numerics::{Graph, ParamId, ParamStore, Tensor, Var};
use crate::rng::Rng;

#[derive(Clone, Debug, PartialEq)]
pub struct BackboneConfig {
    pub image_size: usize,
    pub patch_size: usize,
    pub channels: usize,
    pub layers: usize,
    pub heads: usize,
    pub mlp_ratio: usize,
}

impl Default for BackboneConfig {
    fn default() -> Self {
        Self {
            image_size: 32,
            patch_size: 4,
            channels: 32,
            layers: 4,
            heads: 4,
            mlp_ratio: 2,
        }
    }
}

impl BackboneConfig {
    pub fn validate(&self) -> Result<()> {
        if self.patch_size == 0 || self.image_size == 0 || !self.image_size.is_multiple_of(self.patch_size) {
            return Err(Error::Config(format!(
                "image size {} is not divisible by patch size {}",
                self.image_size, self.patch_size
            )));
        }
        if self.heads == 0 || self.channels == 0 || !self.channels.is_multiple_of(self.heads) {
            return Err(Error::Config(format!(
                "channels {} not divisible by heads {}",
                self.channels, self.heads
            )));
        }
        if self.layers == 0 || self.mlp_ratio == 0 {
            return Err(Error::Config("layers and mlp_ratio must be positive".into()));
        }
        Ok(())
    }

    /// Token grid side length (`H = W`).
    pub fn grid(&self) -> usize {
        self.image_size / self.patch_size
    }

    pub fn tokens(&self) -> usize {
        self.grid() * self.grid()
    }
}

/// Batch layout of a token-major activation `[batch * height * width x C]`.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct GridShape {
    pub batch: usize,
    pub height: usize,
    pub width: usize,
}

impl GridShape {
    pub fn tokens(&self) -> usize {
        self.height * self.width
    }

    pub fn rows(&self) -> usize {
        self.batch * self.tokens()
    }
}

/// One sample's patch tokens with their spatial interpretation. Token `k`
/// sits at cell `(k / W, k % W)`.
#[derive(Clone, Debug, PartialEq)]
pub struct TokenGrid {
    pub tokens: Tensor,
    pub grid_h: usize,
    pub grid_w: usize,
}

impl TokenGrid {
    pub fn new(tokens: Tensor, grid_h: usize, grid_w: usize) -> Result<Self> {
        if tokens.shape().len() != 2 || tokens.rows() != grid_h * grid_w {
            return Err(Error::InvalidShape(format!(
                "token tensor {:?} does not fit a {grid_h}x{grid_w} grid",
                tokens.shape()
            )));
        }
        Ok(Self { tokens, grid_h, grid_w })
    }

    pub fn channels(&self) -> usize {
        self.tokens.cols()
    }

    /// `[H x W x C]` view; a pure reshape of the row-major token order.
    pub fn to_spatial(&self) -> Tensor {
        self.tokens
            .clone()
            .reshape([self.grid_h, self.grid_w, self.channels()])
            .expect("grid invariant")
    }

    pub fn from_spatial(map: Tensor) -> Result<Self> {
        let [h, w, c] = *map.shape() else {
            return Err(Error::InvalidShape(format!("expected H x W x C, got {:?}", map.shape())));
        };
        Self::new(map.reshape([h * w, c])?, h, w)
    }

    /// Cell coordinates of token `k`.
    pub fn cell(&self, k: usize) -> (usize, usize) {
        (k / self.grid_w, k % self.grid_w)
    }
}

/// Flattens non-overlapping `P x P` patches of `[B x 3 x H x W]` images into
/// rows `[B*N x 3*P*P]`, each row ordered `(channel, py, px)`.
pub fn extract_patches(images: &Tensor, patch: usize) -> Result<(Tensor, GridShape)> {
    let [b, ch, h, w] = *images.shape() else {
        return Err(Error::InvalidShape(format!("images must be B x C x H x W, got {:?}", images.shape())));
    };
    if patch == 0 || h % patch != 0 || w % patch != 0 {
        return Err(Error::InvalidShape(format!(
            "image {h}x{w} is not divisible into {patch}x{patch} patches"
        )));
    }
    let (gh, gw) = (h / patch, w / patch);
    let plen = ch * patch * patch;
    let mut out = vec![0.0; b * gh * gw * plen];
    let data = images.data();
    for bi in 0..b {
        for ty in 0..gh {
            for tx in 0..gw {
                let row = (bi * gh + ty) * gw + tx;
                let dst = &mut out[row * plen..(row + 1) * plen];
                for c in 0..ch {
                    for py in 0..patch {
                        let src = ((bi * ch + c) * h + ty * patch + py) * w + tx * patch;
                        let d = (c * patch + py) * patch;
                        dst[d..d + patch].copy_from_slice(&data[src..src + patch]);
                    }
                }
            }
        }
    }
    let grid = GridShape {
        batch: b,
        height: gh,
        width: gw,
    };
    Ok((Tensor::new([grid.rows(), plen], out)?, grid))
}

#[derive(Clone, Debug)]
pub struct TransformerLayer {
    ln1_g: ParamId,
    ln1_b: ParamId,
    qkv_w: ParamId,
    qkv_b: ParamId,
    proj_w: ParamId,
    proj_b: ParamId,
    ln2_g: ParamId,
    ln2_b: ParamId,
    fc1_w: ParamId,
    fc1_b: ParamId,
    fc2_w: ParamId,
    fc2_b: ParamId,
    heads: usize,
}

pub(crate) fn linear_params(
    store: &mut ParamStore,
    rng: &mut Rng,
    name: &str,
    cin: usize,
    cout: usize,
) -> Result<(ParamId, ParamId)> {
    let w = store.trainable(format!("{name}.w"), xavier_uniform(rng, &[cin, cout], cin, cout))?;
    let b = store.trainable(format!("{name}.b"), Tensor::zeros([cout]))?;
    Ok((w, b))
}

pub(crate) fn norm_params(store: &mut ParamStore, name: &str, c: usize) -> Result<(ParamId, ParamId)> {
    let g = store.trainable(format!("{name}.gamma"), Tensor::full([c], 1.0))?;
    let b = store.trainable(format!("{name}.beta"), Tensor::zeros([c]))?;
    Ok((g, b))
}

impl TransformerLayer {
    pub fn new(store: &mut ParamStore, rng: &mut Rng, name: &str, cfg: &BackboneConfig) -> Result<Self> {
        let c = cfg.channels;
        let hidden = c * cfg.mlp_ratio;
        let (ln1_g, ln1_b) = norm_params(store, &format!("{name}.ln1"), c)?;
        let (qkv_w, qkv_b) = linear_params(store, rng, &format!("{name}.attn.qkv"), c, 3 * c)?;
        let (proj_w, proj_b) = linear_params(store, rng, &format!("{name}.attn.proj"), c, c)?;
        let (ln2_g, ln2_b) = norm_params(store, &format!("{name}.ln2"), c)?;
        let (fc1_w, fc1_b) = linear_params(store, rng, &format!("{name}.mlp.fc1"), c, hidden)?;
        let (fc2_w, fc2_b) = linear_params(store, rng, &format!("{name}.mlp.fc2"), hidden, c)?;
        Ok(Self {
            ln1_g,
            ln1_b,
            qkv_w,
            qkv_b,
            proj_w,
            proj_b,
            ln2_g,
            ln2_b,
            fc1_w,
            fc1_b,
            fc2_w,
            fc2_b,
            heads: cfg.heads,
        })
    }

    /// `x + MHSA(LN(x))` followed by `x + MLP(LN(x))`.
    pub fn forward(&self, g: &mut Graph, store: &ParamStore, x: Var, grid: GridShape) -> Result<Var> {
        let p = |g: &mut Graph, id| g.param(store, id);
        let (ln1_g, ln1_b) = (p(g, self.ln1_g), p(g, self.ln1_b));
        let h = g.layer_norm(x, ln1_g, ln1_b)?;
        let (w, b) = (p(g, self.qkv_w), p(g, self.qkv_b));
        let qkv = g.linear(h, w, b)?;
        let attn = g.attention(qkv, grid.batch, grid.tokens(), self.heads)?;
        let (w, b) = (p(g, self.proj_w), p(g, self.proj_b));
        let attn = g.linear(attn, w, b)?;
        let x = g.add(x, attn)?;

        let (ln2_g, ln2_b) = (p(g, self.ln2_g), p(g, self.ln2_b));
        let h = g.layer_norm(x, ln2_g, ln2_b)?;
        let (w, b) = (p(g, self.fc1_w), p(g, self.fc1_b));
        let h = g.linear(h, w, b)?;
        let h = g.gelu(h);
        let (w, b) = (p(g, self.fc2_w), p(g, self.fc2_b));
        let h = g.linear(h, w, b)?;
        g.add(x, h)
    }

    /// Parameter ids of the attention and MLP projections.
    pub fn projection_ids(&self) -> [ParamId; 8] {
        [
            self.qkv_w,
            self.qkv_b,
            self.proj_w,
            self.proj_b,
            self.fc1_w,
            self.fc1_b,
            self.fc2_w,
            self.fc2_b,
        ]
    }
}

#[derive(Clone, Debug)]
pub struct Backbone {
    pub config: BackboneConfig,
    pub embed_w: ParamId,
    pub embed_b: ParamId,
    pub pos: ParamId,
    pub layers: Vec<TransformerLayer>,
}

impl Backbone {
    pub fn new(store: &mut ParamStore, rng: &mut Rng, cfg: &BackboneConfig) -> Result<Self> {
        cfg.validate()?;
        let plen = 3 * cfg.patch_size * cfg.patch_size;
        let (embed_w, embed_b) = linear_params(store, rng, "backbone.embed", plen, cfg.channels)?;
        let pos = store.trainable("backbone.pos", uniform(rng, &[cfg.tokens(), cfg.channels], 0.02))?;
        let layers = (1..=cfg.layers)
            .map(|l| TransformerLayer::new(store, rng, &format!("backbone.layer{l}"), cfg))
            .collect::<Result<_>>()?;
        Ok(Self {
            config: cfg.clone(),
            embed_w,
            embed_b,
            pos,
            layers,
        })
    }

    /// Embeds `[B x 3 x H x W]` images into tokens `X^0` with positional embedding.
    pub fn patchify(&self, g: &mut Graph, store: &ParamStore, images: &Tensor) -> Result<(Var, GridShape)> {
        let (patches, grid) = extract_patches(images, self.config.patch_size)?;
        if grid.tokens() != self.config.tokens() {
            return Err(Error::InvalidShape(format!(
                "image yields {} tokens, backbone expects {}",
                grid.tokens(),
                self.config.tokens()
            )));
        }
        let x = g.input(patches);
        let (w, b) = (g.param(store, self.embed_w), g.param(store, self.embed_b));
        let x = g.linear(x, w, b)?;
        let pos = g.param(store, self.pos);
        Ok((g.add_tiled(x, pos)?, grid))
    }

    /// Returns `[X^1, ..., X^L]`; layer `l` consumes layer `l-1`'s output unchanged.
    pub fn run(&self, g: &mut Graph, store: &ParamStore, images: &Tensor) -> Result<(Vec<Var>, GridShape)> {
        let (mut x, grid) = self.patchify(g, store, images)?;
        let mut outs = Vec::with_capacity(self.layers.len());
        for layer in &self.layers {
            x = layer.forward(g, store, x, grid)?;
            outs.push(x);
        }
        Ok((outs, grid))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::kernels;
    use crate::rng;
    use rand::Rng as _;

    fn small() -> BackboneConfig {
        BackboneConfig {
            image_size: 8,
            patch_size: 4,
            channels: 4,
            layers: 3,
            heads: 2,
            mlp_ratio: 2,
        }
    }

    fn random_images(b: usize, size: usize, seed: u64) -> Tensor {
        let mut r = rng::rng(seed);
        let n = b * 3 * size * size;
        Tensor::new([b, 3, size, size], (0..n).map(|_| r.gen::<f64>()).collect()).unwrap()
    }

    #[test]
    fn config_validation() {
        assert!(small().validate().is_ok());
        let bad = BackboneConfig {
            image_size: 10,
            ..small()
        };
        assert!(bad.validate().is_err());
        let bad = BackboneConfig { heads: 3, ..small() };
        assert!(bad.validate().is_err());
    }

    #[test]
    fn patch_counting() {
        let (p, grid) = extract_patches(&Tensor::zeros([1, 3, 8, 8]), 4).unwrap();
        assert_eq!((grid.height, grid.width, grid.tokens()), (2, 2, 4));
        assert_eq!(p.shape(), &[4, 48]);
        assert!(extract_patches(&Tensor::zeros([1, 3, 8, 8]), 3).is_err());
    }

    #[test]
    fn zero_image_yields_embedding_bias() {
        let mut store = ParamStore::new();
        let bb = Backbone::new(&mut store, &mut rng::rng(0), &small()).unwrap();
        store.set(bb.pos, Tensor::zeros([4, 4])).unwrap();
        store.set(bb.embed_b, Tensor::new([4], vec![0.1, -0.2, 0.3, 0.4]).unwrap()).unwrap();
        let mut g = Graph::new();
        let (x, _) = bb.patchify(&mut g, &store, &Tensor::zeros([1, 3, 8, 8])).unwrap();
        for row in g.value(x).data().chunks(4) {
            assert_eq!(row, &[0.1, -0.2, 0.3, 0.4]);
        }
    }

    #[test]
    fn patchify_matches_naive_slicing() {
        let mut store = ParamStore::new();
        let bb = Backbone::new(&mut store, &mut rng::rng(3), &small()).unwrap();
        let img = random_images(1, 8, 4);
        let mut g = Graph::new();
        let (x, _) = bb.patchify(&mut g, &store, &img).unwrap();
        let (w, b, pos) = (store.get(bb.embed_w), store.get(bb.embed_b), store.get(bb.pos));
        for k in 0..4 {
            let (ty, tx) = (k / 2, k % 2);
            let mut flat = Vec::new();
            for c in 0..3 {
                for py in 0..4 {
                    for px in 0..4 {
                        flat.push(img.data()[(c * 8 + ty * 4 + py) * 8 + tx * 4 + px]);
                    }
                }
            }
            let row = Tensor::new([1, 48], flat).unwrap();
            let emb = kernels::linear(&row, w, b).unwrap();
            for c in 0..4 {
                let expected = emb.data()[c] + pos.at(k, c);
                assert!((g.value(x).at(k, c) - expected).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn zero_projections_make_layer_identity() {
        let cfg = small();
        let mut store = ParamStore::new();
        let bb = Backbone::new(&mut store, &mut rng::rng(1), &cfg).unwrap();
        for id in bb.layers[0].projection_ids() {
            let shape = store.get(id).shape().to_vec();
            store.set(id, Tensor::zeros(shape)).unwrap();
        }
        let mut g = Graph::new();
        let (x0, grid) = bb.patchify(&mut g, &store, &random_images(2, 8, 2)).unwrap();
        let x1 = bb.layers[0].forward(&mut g, &store, x0, grid).unwrap();
        assert!(g.value(x1).bit_eq(g.value(x0)));
    }

    #[test]
    fn two_token_attention_matches_closed_form() {
        let cfg = BackboneConfig {
            image_size: 2,
            patch_size: 1,
            channels: 2,
            layers: 1,
            heads: 1,
            mlp_ratio: 1,
        };
        let mut r = rng::rng(8);
        let qkv: Vec<f64> = (0..12).map(|_| r.gen_range(-1.0..1.0)).collect();
        let mut g = Graph::new();
        let x = g.input(Tensor::new([2, 6], qkv.clone()).unwrap());
        let out = g.attention(x, 1, 2, cfg.heads).unwrap();
        let q = |i: usize| [qkv[i * 6], qkv[i * 6 + 1]];
        let k = |i: usize| [qkv[i * 6 + 2], qkv[i * 6 + 3]];
        let v = |i: usize| [qkv[i * 6 + 4], qkv[i * 6 + 5]];
        for i in 0..2 {
            let s: Vec<f64> = (0..2)
                .map(|j| (q(i)[0] * k(j)[0] + q(i)[1] * k(j)[1]) / 2f64.sqrt())
                .collect();
            let e0 = s[0].exp();
            let e1 = s[1].exp();
            let (p0, p1) = (e0 / (e0 + e1), e1 / (e0 + e1));
            for c in 0..2 {
                let expected = p0 * v(0)[c] + p1 * v(1)[c];
                assert!((g.value(out).at(i, c) - expected).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn run_replays_layer_by_layer() {
        let cfg = small();
        let mut store = ParamStore::new();
        let bb = Backbone::new(&mut store, &mut rng::rng(5), &cfg).unwrap();
        let img = random_images(2, 8, 6);
        let mut g = Graph::new();
        let (outs, grid) = bb.run(&mut g, &store, &img).unwrap();
        assert_eq!(outs.len(), 3);
        for o in &outs {
            assert_eq!(g.value(*o).shape(), &[8, 4]);
        }
        let mut g2 = Graph::new();
        let x1 = g2.input(g.value(outs[0]).clone());
        let x2 = bb.layers[1].forward(&mut g2, &store, x1, grid).unwrap();
        assert!(g2.value(x2).bit_eq(g.value(outs[1])));

        let mut g3 = Graph::new();
        let (again, _) = bb.run(&mut g3, &store, &img).unwrap();
        assert!(g3.value(again[2]).bit_eq(g.value(outs[2])));
    }

    #[test]
    fn single_layer_is_layer_of_patchify() {
        let cfg = BackboneConfig { layers: 1, ..small() };
        let mut store = ParamStore::new();
        let bb = Backbone::new(&mut store, &mut rng::rng(5), &cfg).unwrap();
        let img = random_images(1, 8, 9);
        let mut g = Graph::new();
        let (outs, _) = bb.run(&mut g, &store, &img).unwrap();
        let mut g2 = Graph::new();
        let (x0, grid) = bb.patchify(&mut g2, &store, &img).unwrap();
        let x1 = bb.layers[0].forward(&mut g2, &store, x0, grid).unwrap();
        assert!(g2.value(x1).bit_eq(g.value(outs[0])));
    }

    #[test]
    fn token_grid_spatial_round_trip() {
        let t = Tensor::new([6, 2], (0..12).map(f64::from).collect()).unwrap();
        let grid = TokenGrid::new(t.clone(), 2, 3).unwrap();
        let spatial = grid.to_spatial();
        assert_eq!(spatial.shape(), &[2, 3, 2]);
        // token 4 lives at row 1, column 1
        assert_eq!(grid.cell(4), (1, 1));
        assert_eq!(spatial.data()[(3 + 1) * 2], t.at(4, 0));
        assert_eq!(TokenGrid::from_spatial(spatial).unwrap(), grid);
        assert!(TokenGrid::new(t, 2, 2).is_err());
    }
}
