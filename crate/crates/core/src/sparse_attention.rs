//! Near-linear multi-axis attention over per-view feature grids.
//!
//! Three sparse patterns are applied in sequence inside every encoder block:
//!
//! * **block**: self-attention inside each non-overlapping `P x P` window;
//! * **grid**: the map is cut into a `G x G` lattice of cells and tokens that
//!   share the same offset inside their cell attend to each other (a strided,
//!   dilated token set of `G²` members);
//! * **inter-view**: at every spatial position the `N` views attend to each
//!   other.
//!
//! A grid whose sides are not multiples of `P` or `G` is zero-padded with the
//! pad tokens masked out of every attention and cropped afterwards
//! ([`pad_grid`], [`crop_grid`]). The attention ops themselves require
//! divisibility.

use nrt_kernel::{counter, Graph, LayerNorm, Mlp, MultiHeadAttention, ParamStore, Rng, Var, ZERO_ROW};

use crate::error::{invalid, Result};

/// `N x H x W x C` features of all source views, recorded on a graph.
#[derive(Debug, Clone)]
pub struct ViewFeatureGrid {
    pub var: Var,
    pub views: usize,
    pub height: usize,
    pub width: usize,
    pub channels: usize,
    /// Per-token validity (`N·H·W`); `None` means all valid.
    pub valid: Option<Vec<bool>>,
}

impl ViewFeatureGrid {
    pub fn new(g: &Graph, var: Var) -> Result<Self> {
        let s = g.shape(var);
        if s.len() != 4 {
            return Err(invalid(format!("view feature grid must be N x H x W x C, got {s:?}")));
        }
        Ok(Self {
            var,
            views: s[0],
            height: s[1],
            width: s[2],
            channels: s[3],
            valid: None,
        })
    }

    pub fn tokens(&self) -> usize {
        self.views * self.height * self.width
    }

    fn with_var(&self, var: Var) -> Self {
        Self { var, ..self.clone() }
    }
}

/// Token groups for one attention pattern: `groups.len() / group_len` groups,
/// each listing flat token indices `(view·H + row)·W + col`.
#[derive(Debug, Clone, PartialEq)]
pub struct Partition {
    pub group_len: usize,
    pub groups: Vec<usize>,
}

impl Partition {
    pub fn group_count(&self) -> usize {
        self.groups.len() / self.group_len
    }

    pub fn group(&self, i: usize) -> &[usize] {
        &self.groups[i * self.group_len..(i + 1) * self.group_len]
    }
}

fn check_divisible(h: usize, w: usize, k: usize, what: &str) -> Result<()> {
    if k == 0 || h % k != 0 || w % k != 0 {
        return Err(invalid(format!("{h}x{w} feature map is not divisible by {what} size {k}")));
    }
    Ok(())
}

/// Non-overlapping `p x p` windows, row-major within each window.
pub fn block_partition(views: usize, h: usize, w: usize, p: usize) -> Result<Partition> {
    check_divisible(h, w, p, "block")?;
    let mut groups = Vec::with_capacity(views * h * w);
    for v in 0..views {
        for wy in 0..h / p {
            for wx in 0..w / p {
                for dy in 0..p {
                    for dx in 0..p {
                        groups.push((v * h + wy * p + dy) * w + wx * p + dx);
                    }
                }
            }
        }
    }
    Ok(Partition {
        group_len: p * p,
        groups,
    })
}

/// `g x g` lattice of cells; each group holds the `g²` tokens at one intra-cell
/// offset, i.e. tokens spaced `h/g` rows and `w/g` columns apart.
pub fn grid_partition(views: usize, h: usize, w: usize, g: usize) -> Result<Partition> {
    check_divisible(h, w, g, "grid")?;
    let (sy, sx) = (h / g, w / g);
    let mut groups = Vec::with_capacity(views * h * w);
    for v in 0..views {
        for oy in 0..sy {
            for ox in 0..sx {
                for gy in 0..g {
                    for gx in 0..g {
                        groups.push((v * h + gy * sy + oy) * w + gx * sx + ox);
                    }
                }
            }
        }
    }
    Ok(Partition { group_len: g * g, groups })
}

/// One group per spatial position containing that position in every view.
pub fn view_partition(views: usize, h: usize, w: usize) -> Partition {
    let hw = h * w;
    let mut groups = Vec::with_capacity(views * hw);
    for pos in 0..hw {
        for v in 0..views {
            groups.push(v * hw + pos);
        }
    }
    Partition { group_len: views, groups }
}

/// Self-attention restricted to each group of `partition`.
pub fn grouped_attention(
    g: &mut Graph,
    store: &ParamStore,
    mha: &MultiHeadAttention,
    x: &ViewFeatureGrid,
    partition: &Partition,
) -> Result<ViewFeatureGrid> {
    let (t, c) = (x.tokens(), x.channels);
    if partition.groups.len() != t {
        return Err(invalid(format!("partition covers {} of {t} tokens", partition.groups.len())));
    }
    let flat = g.reshape(x.var, &[t, c])?;
    let grouped = g.gather_rows(flat, &partition.groups)?;
    let grouped = g.reshape(grouped, &[partition.group_count(), partition.group_len, c])?;
    let mask: Option<Vec<bool>> = x
        .valid
        .as_ref()
        .map(|v| partition.groups.iter().map(|&i| v[i]).collect());
    let (out, _) = mha.forward(g, store, grouped, grouped, mask.as_deref())?;
    let mut inverse = vec![0usize; t];
    for (slot, &tok) in partition.groups.iter().enumerate() {
        inverse[tok] = slot;
    }
    let out = g.reshape(out, &[t, c])?;
    let back = g.gather_rows(out, &inverse)?;
    let back = g.reshape(back, &[x.views, x.height, x.width, c])?;
    Ok(x.with_var(back))
}

/// Self-attention inside each `P x P` window of every view.
pub fn block_attention(
    g: &mut Graph,
    store: &ParamStore,
    mha: &MultiHeadAttention,
    x: &ViewFeatureGrid,
    p: usize,
) -> Result<ViewFeatureGrid> {
    let part = block_partition(x.views, x.height, x.width, p)?;
    grouped_attention(g, store, mha, x, &part)
}

/// Self-attention among same-offset tokens of a `G x G` cell lattice.
pub fn grid_attention(
    g: &mut Graph,
    store: &ParamStore,
    mha: &MultiHeadAttention,
    x: &ViewFeatureGrid,
    grid: usize,
) -> Result<ViewFeatureGrid> {
    let part = grid_partition(x.views, x.height, x.width, grid)?;
    grouped_attention(g, store, mha, x, &part)
}

/// Attention across views at every spatial position.
pub fn interview_attention(
    g: &mut Graph,
    store: &ParamStore,
    mha: &MultiHeadAttention,
    x: &ViewFeatureGrid,
) -> Result<ViewFeatureGrid> {
    let part = view_partition(x.views, x.height, x.width);
    grouped_attention(g, store, mha, x, &part)
}

fn round_up(n: usize, k: usize) -> usize {
    n.div_ceil(k) * k
}

/// Zero-pads `x` so both spatial sides are multiples of `multiple`; pad tokens
/// are marked invalid. Returns the input unchanged when no padding is needed.
pub fn pad_grid(g: &mut Graph, x: &ViewFeatureGrid, multiple: usize) -> Result<ViewFeatureGrid> {
    let (hp, wp) = (round_up(x.height, multiple), round_up(x.width, multiple));
    if hp == x.height && wp == x.width {
        return Ok(x.clone());
    }
    let mut idx = Vec::with_capacity(x.views * hp * wp);
    let mut valid = Vec::with_capacity(x.views * hp * wp);
    for v in 0..x.views {
        for r in 0..hp {
            for c in 0..wp {
                if r < x.height && c < x.width {
                    let src = (v * x.height + r) * x.width + c;
                    idx.push(src);
                    valid.push(x.valid.as_ref().is_none_or(|m| m[src]));
                } else {
                    idx.push(ZERO_ROW);
                    valid.push(false);
                }
            }
        }
    }
    let flat = g.reshape(x.var, &[x.tokens(), x.channels])?;
    let padded = g.gather_rows(flat, &idx)?;
    let var = g.reshape(padded, &[x.views, hp, wp, x.channels])?;
    Ok(ViewFeatureGrid {
        var,
        views: x.views,
        height: hp,
        width: wp,
        channels: x.channels,
        valid: Some(valid),
    })
}

/// Crops a padded grid back to `height x width`.
pub fn crop_grid(g: &mut Graph, x: &ViewFeatureGrid, height: usize, width: usize) -> Result<ViewFeatureGrid> {
    if x.height == height && x.width == width {
        return Ok(x.clone());
    }
    let mut idx = Vec::with_capacity(x.views * height * width);
    for v in 0..x.views {
        for r in 0..height {
            for c in 0..width {
                idx.push((v * x.height + r) * x.width + c);
            }
        }
    }
    let flat = g.reshape(x.var, &[x.tokens(), x.channels])?;
    let cropped = g.gather_rows(flat, &idx)?;
    let var = g.reshape(cropped, &[x.views, height, width, x.channels])?;
    let valid = x.valid.as_ref().map(|m| idx.iter().map(|&i| m[i]).collect::<Vec<_>>());
    Ok(ViewFeatureGrid {
        var,
        views: x.views,
        height,
        width,
        channels: x.channels,
        valid: valid.filter(|v| v.iter().any(|&b| !b)),
    })
}

fn residual(g: &mut Graph, x: &ViewFeatureGrid, branch: Var) -> Result<ViewFeatureGrid> {
    let sum = g.add(x.var, branch)?;
    Ok(x.with_var(sum))
}

/// Attention sub-layer followed by a feed-forward sub-layer, both pre-normed
/// and residual.
#[derive(Debug, Clone)]
pub struct AttentionSublayer {
    pub norm_attn: LayerNorm,
    pub attn: MultiHeadAttention,
    pub norm_ffn: LayerNorm,
    pub ffn: Mlp,
}

impl AttentionSublayer {
    pub fn new(store: &mut ParamStore, name: &str, width: usize, heads: usize, ff_mult: usize, rng: &mut Rng) -> Result<Self> {
        Ok(Self {
            norm_attn: LayerNorm::new(store, &format!("{name}.norm_attn"), width),
            attn: MultiHeadAttention::new(store, &format!("{name}.attn"), width, heads, rng)?,
            norm_ffn: LayerNorm::new(store, &format!("{name}.norm_ffn"), width),
            ffn: Mlp::new(store, &format!("{name}.ffn"), &[width, ff_mult * width, width], rng),
        })
    }

    fn forward(
        &self,
        g: &mut Graph,
        store: &ParamStore,
        x: &ViewFeatureGrid,
        partition: &Partition,
    ) -> Result<ViewFeatureGrid> {
        let n = self.norm_attn.forward(g, store, x.var)?;
        let a = grouped_attention(g, store, &self.attn, &x.with_var(n), partition)?;
        let x = residual(g, x, a.var)?;
        let n = self.norm_ffn.forward(g, store, x.var)?;
        let f = self.ffn.forward(g, store, n)?;
        residual(g, &x, f)
    }

    pub fn zero_output_projections(&self, store: &mut ParamStore) {
        self.attn.output.zero(store);
        self.ffn.output().zero(store);
    }

    pub fn parameter_count(&self) -> usize {
        self.attn.parameter_count() + self.ffn.parameter_count() + 4 * self.attn.query.fan_in
    }
}

/// Block, grid and inter-view attention applied in sequence.
#[derive(Debug, Clone)]
pub struct EncoderBlock {
    pub block: AttentionSublayer,
    pub grid: AttentionSublayer,
    pub views: AttentionSublayer,
    pub block_size: usize,
    pub grid_size: usize,
}

impl EncoderBlock {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        width: usize,
        heads: usize,
        ff_mult: usize,
        block_size: usize,
        grid_size: usize,
        rng: &mut Rng,
    ) -> Result<Self> {
        if block_size == 0 || grid_size == 0 {
            return Err(invalid("block and grid sizes must be positive"));
        }
        Ok(Self {
            block: AttentionSublayer::new(store, &format!("{name}.block"), width, heads, ff_mult, rng)?,
            grid: AttentionSublayer::new(store, &format!("{name}.grid"), width, heads, ff_mult, rng)?,
            views: AttentionSublayer::new(store, &format!("{name}.views"), width, heads, ff_mult, rng)?,
            block_size,
            grid_size,
        })
    }

    /// Requires spatial sides divisible by both `P` and `G`; see
    /// [`encode_grid`] for the padding wrapper.
    pub fn forward(&self, g: &mut Graph, store: &ParamStore, x: &ViewFeatureGrid) -> Result<ViewFeatureGrid> {
        let bp = block_partition(x.views, x.height, x.width, self.block_size)?;
        let gp = grid_partition(x.views, x.height, x.width, self.grid_size)?;
        let vp = view_partition(x.views, x.height, x.width);
        let x = self.block.forward(g, store, x, &bp)?;
        let x = self.grid.forward(g, store, &x, &gp)?;
        self.views.forward(g, store, &x, &vp)
    }

    pub fn zero_output_projections(&self, store: &mut ParamStore) {
        self.block.zero_output_projections(store);
        self.grid.zero_output_projections(store);
        self.views.zero_output_projections(store);
    }

    pub fn parameter_count(&self) -> usize {
        self.block.parameter_count() + self.grid.parameter_count() + self.views.parameter_count()
    }
}

fn lcm(a: usize, b: usize) -> usize {
    fn gcd(a: usize, b: usize) -> usize {
        if b == 0 {
            a
        } else {
            gcd(b, a % b)
        }
    }
    a / gcd(a, b) * b
}

/// Runs `blocks` on `x`, padding to a common multiple of `P` and `G` first
/// and cropping afterwards.
pub fn encode_grid(
    g: &mut Graph,
    store: &ParamStore,
    blocks: &[EncoderBlock],
    x: &ViewFeatureGrid,
) -> Result<ViewFeatureGrid> {
    let Some(first) = blocks.first() else {
        return Ok(x.clone());
    };
    let multiple = lcm(first.block_size, first.grid_size);
    let mut h = pad_grid(g, x, multiple)?;
    for b in blocks {
        h = b.forward(g, store, &h)?;
    }
    crop_grid(g, &h, x.height, x.width)
}

/// Baseline block: one attention over all `N·H·W` tokens jointly plus a
/// feed-forward sub-layer.
#[derive(Debug, Clone)]
pub struct FullAttentionBlock {
    pub inner: AttentionSublayer,
}

impl FullAttentionBlock {
    pub fn new(store: &mut ParamStore, name: &str, width: usize, heads: usize, ff_mult: usize, rng: &mut Rng) -> Result<Self> {
        Ok(Self {
            inner: AttentionSublayer::new(store, name, width, heads, ff_mult, rng)?,
        })
    }

    pub fn forward(&self, g: &mut Graph, store: &ParamStore, x: &ViewFeatureGrid) -> Result<ViewFeatureGrid> {
        let all = Partition {
            group_len: x.tokens(),
            groups: (0..x.tokens()).collect(),
        };
        self.inner.forward(g, store, x, &all)
    }
}

/// Counts the multiply-accumulates of running `f`.
pub fn count_macs<T>(f: impl FnOnce() -> T) -> (T, u64) {
    counter::reset();
    let out = f();
    (out, counter::read())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct CostConfig {
    pub height: usize,
    pub width: usize,
    pub channels: usize,
    pub views: usize,
    pub block: usize,
    pub grid: usize,
    pub heads: usize,
    pub blocks: usize,
    pub ff_mult: usize,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CostRow {
    pub stage: String,
    pub flops: u64,
    pub parameters: u64,
}

/// FLOPs are `2 x` the multiply-accumulates of the dense products (linear
/// projections, attention scores and weighted values, feed-forward layers).
/// Element-wise work is not counted.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CostReport {
    pub flops: u64,
    pub parameters: u64,
    pub breakdown: Vec<CostRow>,
}

impl CostReport {
    fn from_rows(breakdown: Vec<CostRow>) -> Self {
        Self {
            flops: breakdown.iter().map(|r| r.flops).sum(),
            parameters: breakdown.iter().map(|r| r.parameters).sum(),
            breakdown,
        }
    }

    /// FLOPs of rows whose stage name ends with `suffix`.
    pub fn flops_of(&self, suffix: &str) -> u64 {
        self.breakdown
            .iter()
            .filter(|r| r.stage.ends_with(suffix))
            .map(|r| r.flops)
            .sum()
    }

    pub fn to_csv(&self) -> String {
        let mut s = String::from("stage,flops,parameters\n");
        for r in &self.breakdown {
            s.push_str(&format!("{},{},{}\n", r.stage, r.flops, r.parameters));
        }
        s.push_str(&format!("total,{},{}\n", self.flops, self.parameters));
        s
    }
}

fn validate_cost(cfg: &CostConfig, sparse: bool) -> Result<()> {
    let CostConfig {
        height,
        width,
        channels,
        views,
        block,
        grid,
        heads,
        blocks,
        ff_mult,
    } = *cfg;
    if [height, width, channels, views, heads, blocks, ff_mult].contains(&0) {
        return Err(invalid("cost model arguments must be positive"));
    }
    if channels % heads != 0 {
        return Err(invalid(format!("{channels} channels not divisible by {heads} heads")));
    }
    if sparse {
        check_divisible(height, width, block, "block")?;
        check_divisible(height, width, grid, "grid")?;
    }
    Ok(())
}

fn sublayer_rows(prefix: &str, tokens: u64, c: u64, ff_mult: u64, score_macs: u64) -> Vec<CostRow> {
    let hidden = ff_mult * c;
    vec![
        CostRow {
            stage: format!("{prefix}.projections"),
            flops: 2 * 4 * tokens * c * c,
            parameters: 4 * (c * c + c),
        },
        CostRow {
            stage: format!("{prefix}.scores"),
            flops: 2 * score_macs,
            parameters: 0,
        },
        CostRow {
            stage: format!("{prefix}.ffn"),
            flops: 2 * 2 * tokens * c * hidden,
            parameters: c * hidden + hidden + hidden * c + c,
        },
        CostRow {
            stage: format!("{prefix}.norms"),
            flops: 0,
            parameters: 4 * c,
        },
    ]
}

/// Closed-form cost of `blocks` sparse encoder blocks.
pub fn cost_model(cfg: &CostConfig) -> Result<CostReport> {
    validate_cost(cfg, true)?;
    let c = cfg.channels as u64;
    let t = (cfg.views * cfg.height * cfg.width) as u64;
    let (p2, g2, n) = ((cfg.block * cfg.block) as u64, (cfg.grid * cfg.grid) as u64, cfg.views as u64);
    let ff = cfg.ff_mult as u64;
    let mut rows = Vec::new();
    for b in 0..cfg.blocks {
        // every token attends to its group: scores + weighted values = 2·L·C per query
        rows.extend(sublayer_rows(&format!("block{b}.window"), t, c, ff, 2 * t * p2 * c));
        rows.extend(sublayer_rows(&format!("block{b}.grid"), t, c, ff, 2 * t * g2 * c));
        rows.extend(sublayer_rows(&format!("block{b}.views"), t, c, ff, 2 * t * n * c));
    }
    Ok(CostReport::from_rows(rows))
}

/// Closed-form cost of `blocks` full-attention blocks over all tokens.
pub fn cost_model_full(cfg: &CostConfig) -> Result<CostReport> {
    validate_cost(cfg, false)?;
    let c = cfg.channels as u64;
    let t = (cfg.views * cfg.height * cfg.width) as u64;
    let mut rows = Vec::new();
    for b in 0..cfg.blocks {
        rows.extend(sublayer_rows(&format!("block{b}.full"), t, c, cfg.ff_mult as u64, 2 * t * t * c));
    }
    Ok(CostReport::from_rows(rows))
}
