//! Compression and decompression of whole clouds.

use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::autograd::Graph;
use crate::entropy::{
    ac_decode, ac_encode, laplace_table, pack_bitstream, unpack_bitstream, Bitstream, CdfTable, FactorizedDensity,
    Header, DEFAULT_PRECISION, HEADER_LEN,
};
use crate::error::{Error, Result};
use crate::geom::sampling::fps_canonical;
use crate::geom::{NormalizationInfo, PointCloud};
use crate::latent::LatentSet;
use crate::model::Model;
use crate::nn::ParamStore;
use crate::sparse::{coord_to_fixed, fixed_to_coord, snap_positions, QuantMode, COORD_BITS};
use crate::tensor::Tensor;

/// Size of the trailing payload checksum.
pub const CRC_LEN: usize = 4;

#[derive(Clone, Copy, Debug, PartialEq)]
#[derive(Default)]
pub struct CompressOptions {
    /// DDIM steps recorded for the decoder; `None` uses the model default.
    pub steps: Option<usize>,
    pub seed: u64,
}


/// Compressed bytes and their accounting.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Encoded {
    #[serde(skip)]
    pub bytes: Vec<u8>,
    pub header_bytes: usize,
    pub payload_bytes: usize,
    pub z_bytes: usize,
    pub coord_bytes: usize,
    pub y_bytes: usize,
    pub num_sparse: usize,
    pub input_points: usize,
}

impl Encoded {
    pub fn total_bytes(&self) -> usize {
        self.bytes.len()
    }

    /// `8·bytes / N` of the input cloud.
    pub fn bpp(&self) -> f64 {
        8.0 * self.bytes.len() as f64 / self.input_points as f64
    }
}

/// Normalizes with f32-representable centre and scale and brings the cloud
/// to the model's point count.
pub fn prepare_input(model: &Model, cloud: &PointCloud) -> Result<(Tensor, NormalizationInfo)> {
    let n = cloud.len();
    if n < model.cfg.points {
        return Err(Error::ConfigMismatch(format!("model expects at least {} points, input has {n}", model.cfg.points)));
    }
    let (lo, hi) = cloud.bounds();
    let center = [0, 1, 2].map(|a| (0.5 * (lo[a] + hi[a])) as f32 as f64);
    let extent = (0..3).map(|a| hi[a] - lo[a]).fold(0.0, f64::max);
    let scale = if extent > 0.0 { extent as f32 as f64 } else { 1.0 };
    let mut pts = cloud.points().clone();
    for r in 0..pts.rows() {
        for (a, v) in pts.row_mut(r).iter_mut().enumerate() {
            *v = ((*v - center[a]) / scale).clamp(-0.5, 0.5);
        }
    }
    if n > model.cfg.points {
        let keep = fps_canonical(&pts, model.cfg.points, 0)?;
        pts = pts.gather_rows(&keep);
    }
    Ok((pts, NormalizationInfo { center, scale }))
}

fn clip_round(t: &Tensor, q: i64) -> Tensor {
    t.map(|v| v.round().clamp(-q as f64, q as f64))
}

fn symbols(t: &Tensor) -> Vec<i32> {
    t.data().iter().map(|&v| v as i32).collect()
}

fn channel_tables(d: &FactorizedDensity, store: &ParamStore, q: i64) -> Result<Vec<CdfTable>> {
    (0..d.channels).map(|c| d.table(store, c, q, DEFAULT_PRECISION)).collect()
}

/// Row-major per-channel table references for a `rows×channels` matrix.
fn per_channel(tables: &[CdfTable], rows: usize) -> Vec<&CdfTable> {
    (0..rows).flat_map(|_| tables.iter()).collect()
}

fn coord_table() -> Result<CdfTable> {
    CdfTable::uniform(1 << COORD_BITS, 0, DEFAULT_PRECISION)
}

fn encode_coords(pos: &Tensor) -> Result<Vec<u8>> {
    let syms: Vec<i32> = pos.data().iter().map(|&x| coord_to_fixed(x) as i32).collect();
    let t = coord_table()?;
    ac_encode(&syms, &vec![&t; syms.len()])
}

fn decode_coords(bytes: &[u8], n: usize) -> Result<Tensor> {
    let t = coord_table()?;
    let syms = ac_decode(bytes, &vec![&t; 3 * n])?;
    Ok(Tensor::from_vec(n, 3, syms.into_iter().map(|s| fixed_to_coord(s as u16)).collect()))
}

/// Laplace tables for every element of `Y_s`, from `Ẑ_s`.
fn laplace_tables(model: &Model, z_hat: &Tensor, n_s: usize, q: i64) -> Result<Vec<CdfTable>> {
    let st = model.stage_two()?;
    let mut g = Graph::new();
    let z = g.constant(z_hat.clone());
    let s = st.sparse.synthesis_transform(&mut g, &model.store, z, n_s)?;
    let (mu, sigma) = (g.value(s.mu), g.value(s.sigma));
    mu.data().iter().zip(sigma.data()).map(|(&m, &b)| laplace_table(m, b, q, DEFAULT_PRECISION)).collect()
}

/// Symbols of one cloud before entropy coding.
#[derive(Clone, Debug, PartialEq)]
pub struct Symbols {
    pub positions: Tensor,
    pub y_hat: Tensor,
    pub z_hat: Option<Tensor>,
}

/// Runs the analysis side with rounding and clipping.
pub fn analyze(model: &Model, points: &Tensor) -> Result<Symbols> {
    let q = model.cfg.sparse.q_max;
    match &model.stage_two {
        Some(st) => {
            let mut g = Graph::new();
            let mut rng = rand::rngs::mock::StepRng::new(0, 0);
            let sf = st.sparse.forward(&mut g, &model.store, points, QuantMode::Round, &mut rng)?;
            let y_hat = clip_round(g.value(sf.y_hat), q);
            let z_hat = model.cfg.variant.uses_hyper().then(|| clip_round(g.value(sf.z_hat), q));
            Ok(Symbols { positions: sf.positions, y_hat, z_hat })
        }
        None => {
            let lat = model.ae.encode_latent(&model.store, points)?;
            Ok(Symbols { positions: snap_positions(&lat.positions), y_hat: clip_round(&lat.features, q), z_hat: None })
        }
    }
}

fn y_density(model: &Model) -> Result<&FactorizedDensity> {
    match (&model.stage_two, &model.feature_density) {
        (Some(st), _) => Ok(&st.sparse.y_density),
        (None, Some(d)) => Ok(d),
        _ => Err(Error::ConfigMismatch("model has no feature density".into())),
    }
}

/// Entropy codes analyzed symbols into a `.dcp` stream.
pub fn encode_symbols(model: &Model, sym: &Symbols, norm: &NormalizationInfo, opts: &CompressOptions) -> Result<Bitstream> {
    let q = model.cfg.sparse.q_max;
    let n_s = sym.positions.rows();
    let z = match &sym.z_hat {
        Some(zh) => {
            let tables = channel_tables(&model.stage_two()?.sparse.z_density, &model.store, q)?;
            ac_encode(&symbols(zh), &per_channel(&tables, zh.rows()))?
        }
        None => Vec::new(),
    };
    let coords = encode_coords(&sym.positions)?;
    let y = if model.cfg.variant.laplace_coded() {
        let zh = sym.z_hat.as_ref().ok_or_else(|| Error::InvalidArgument("missing hyper symbols".into()))?;
        let tables = laplace_tables(model, zh, n_s, q)?;
        ac_encode(&symbols(&sym.y_hat), &tables.iter().collect::<Vec<_>>())?
    } else {
        let tables = channel_tables(y_density(model)?, &model.store, q)?;
        ac_encode(&symbols(&sym.y_hat), &per_channel(&tables, n_s))?
    };
    Ok(Bitstream { header: expected_header(model, norm, opts)?, z, coords, y })
}

fn expected_header(model: &Model, norm: &NormalizationInfo, opts: &CompressOptions) -> Result<Header> {
    let two = model.cfg.variant.two_stage();
    let steps = if two { opts.steps.unwrap_or(model.cfg.ddim_steps) } else { 0 };
    if two && (steps == 0 || steps > model.schedule.steps()) {
        return Err(Error::InvalidArgument(format!("DDIM steps {steps} outside [1, {}]", model.schedule.steps())));
    }
    let u16_of = |v: usize, what: &str| u16::try_from(v).map_err(|_| Error::ConfigMismatch(format!("{what} {v} exceeds u16")));
    let feat_dim = if two { model.cfg.sparse.code_dim } else { model.ae.latent_dim() };
    let hyper_dim = if model.cfg.variant.uses_hyper() { model.cfg.sparse.hyper_dim } else { 0 };
    Ok(Header {
        num_sparse: u16_of(model.sparse_count()?, "sparse count")?,
        feat_dim: u16_of(feat_dim, "feature width")?,
        hyper_dim: u16_of(hyper_dim, "hyper width")?,
        preserved_size: two && model.cfg.sparse.preserved_size,
        coord_bits: COORD_BITS as u8,
        center: norm.center.map(|c| c as f32),
        scale: norm.scale as f32,
        ddim_steps: u16_of(steps, "DDIM steps")?,
        seed: opts.seed,
        q_max: model.cfg.sparse.q_max as i16,
    })
}

/// Full compression of a raw cloud.
pub fn compress(model: &Model, cloud: &PointCloud, opts: &CompressOptions) -> Result<Encoded> {
    let (pts, norm) = prepare_input(model, cloud)?;
    let sym = analyze(model, &pts)?;
    let bs = encode_symbols(model, &sym, &norm, opts)?;
    let bytes = pack_bitstream(&bs)?;
    Ok(Encoded {
        header_bytes: HEADER_LEN,
        payload_bytes: bs.payload_len() + CRC_LEN,
        z_bytes: bs.z.len(),
        coord_bytes: bs.coords.len(),
        y_bytes: bs.y.len(),
        num_sparse: sym.positions.rows(),
        input_points: cloud.len(),
        bytes,
    })
}

/// Rejects streams produced by a differently configured model.
pub fn check_header(model: &Model, h: &Header) -> Result<()> {
    let want = expected_header(model, &NormalizationInfo { center: [0.0; 3], scale: 1.0 }, &CompressOptions::default())?;
    let mismatch = |what: &str, got: u64, exp: u64| {
        Err(Error::ConfigMismatch(format!("stream {what} is {got}, checkpoint expects {exp}")))
    };
    if h.num_sparse != want.num_sparse {
        return mismatch("sparse count", h.num_sparse as u64, want.num_sparse as u64);
    }
    if h.feat_dim != want.feat_dim {
        return mismatch("feature width", h.feat_dim as u64, want.feat_dim as u64);
    }
    if h.hyper_dim != want.hyper_dim {
        return mismatch("hyper width", h.hyper_dim as u64, want.hyper_dim as u64);
    }
    if h.preserved_size != want.preserved_size {
        return mismatch("preserved-size flag", h.preserved_size as u64, want.preserved_size as u64);
    }
    if h.coord_bits as u32 != COORD_BITS {
        return mismatch("coordinate bits", h.coord_bits as u64, COORD_BITS as u64);
    }
    if h.q_max < 1 || h.q_max as i64 > 1 << 14 {
        return Err(Error::CorruptStream(format!("invalid q_max {}", h.q_max)));
    }
    if model.cfg.variant.two_stage() && (h.ddim_steps == 0 || h.ddim_steps as usize > model.schedule.steps()) {
        return Err(Error::CorruptStream(format!("invalid DDIM step count {}", h.ddim_steps)));
    }
    Ok(())
}

/// Recovers the symbols of a stream.
pub fn decode_symbols(model: &Model, bs: &Bitstream) -> Result<Symbols> {
    let h = &bs.header;
    check_header(model, h)?;
    let q = h.q_max as i64;
    let n_s = h.num_sparse as usize;
    let c = h.feat_dim as usize;
    let z_hat = if h.hyper_dim > 0 {
        let st = model.stage_two()?;
        let rows = model.cfg.sparse.hyper_rows(n_s);
        let tables = channel_tables(&st.sparse.z_density, &model.store, q)?;
        let s = ac_decode(&bs.z, &per_channel(&tables, rows))?;
        Some(Tensor::from_vec(rows, h.hyper_dim as usize, s.into_iter().map(f64::from).collect()))
    } else {
        if !bs.z.is_empty() {
            return Err(Error::CorruptStream("unexpected hyper payload".into()));
        }
        None
    };
    let positions = decode_coords(&bs.coords, n_s)?;
    let ys = if model.cfg.variant.laplace_coded() {
        let zh = z_hat.as_ref().ok_or_else(|| Error::CorruptStream("missing hyper payload".into()))?;
        let tables = laplace_tables(model, zh, n_s, q)?;
        ac_decode(&bs.y, &tables.iter().collect::<Vec<_>>())?
    } else {
        let tables = channel_tables(y_density(model)?, &model.store, q)?;
        ac_decode(&bs.y, &per_channel(&tables, n_s))?
    };
    let y_hat = Tensor::from_vec(n_s, c, ys.into_iter().map(f64::from).collect());
    Ok(Symbols { positions, y_hat, z_hat })
}

/// Reconstruction in the unit-cube frame from decoded symbols.
pub fn reconstruct(model: &Model, sym: &Symbols, steps: usize, seed: u64) -> Result<Tensor> {
    let latent = if model.cfg.variant.two_stage() {
        let priors = model.decode_priors(sym.positions.clone(), sym.y_hat.clone(), sym.z_hat.as_ref())?;
        model.sample_latents(&priors, steps, seed)?
    } else {
        LatentSet { positions: sym.positions.clone(), features: sym.y_hat.clone() }
    };
    model.ae.decode_points(&model.store, &latent)
}

pub struct Decoded {
    pub cloud: PointCloud,
    pub header: Header,
    pub steps: usize,
    pub seconds: f64,
}

/// Full decompression; `steps` overrides the DDIM step count in the header.
pub fn decompress(model: &Model, bytes: &[u8], steps: Option<usize>) -> Result<Decoded> {
    let start = Instant::now();
    let bs = unpack_bitstream(bytes)?;
    let sym = decode_symbols(model, &bs)?;
    let h = bs.header;
    let steps = steps.unwrap_or(h.ddim_steps as usize);
    let rec = reconstruct(model, &sym, steps, h.seed)?;
    let info = NormalizationInfo { center: h.center.map(f64::from), scale: h.scale as f64 };
    let cloud = PointCloud::new(rec)?.denormalize_with(&info);
    Ok(Decoded { cloud, header: h, steps, seconds: start.elapsed().as_secs_f64() })
}
