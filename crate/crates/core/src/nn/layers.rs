//! Recurrent and affine layers with hand-written backward passes.
//!
//! Sequences in a batch are stored packed: the valid steps of every sample
//! sit in consecutive rows of one matrix, samples in batch order. Recurrent
//! state lives in a separate matrix whose rows are ordered by decreasing
//! sequence length, so the samples still running at step `k` always form a
//! prefix and each step is a single matrix product.

use ndarray::linalg::general_mat_mul;
use ndarray::{s, Array2, ArrayView2, Axis};
use rand::Rng;

pub(crate) fn uniform(rows: usize, cols: usize, bound: f64, rng: &mut impl Rng) -> Array2<f64> {
    Array2::from_shape_fn((rows, cols), |_| rng.random_range(-bound..=bound))
}

#[inline]
fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

/// Row layout for a batch of variable-length sequences.
#[derive(Debug, Clone)]
pub struct Packing {
    lens: Vec<usize>,
    offs: Vec<usize>,
    /// State slot -> sample, longest first.
    order: Vec<usize>,
    /// `active[k]` samples have a step `k`.
    active: Vec<usize>,
    total: usize,
}

impl Packing {
    /// All lengths must be at least 1.
    pub fn new(lens: &[usize]) -> Self {
        assert!(lens.iter().all(|&l| l >= 1), "sequences need a valid step");
        let mut offs = Vec::with_capacity(lens.len());
        let mut total = 0;
        for &l in lens {
            offs.push(total);
            total += l;
        }
        let mut order: Vec<usize> = (0..lens.len()).collect();
        order.sort_by(|&a, &b| lens[b].cmp(&lens[a]).then(a.cmp(&b)));
        let max = lens.iter().copied().max().unwrap_or(0);
        let active = (0..max)
            .map(|k| lens.iter().filter(|&&l| l > k).count())
            .collect();
        Packing {
            lens: lens.to_vec(),
            offs,
            order,
            active,
            total,
        }
    }

    pub fn batch(&self) -> usize {
        self.lens.len()
    }

    pub fn total(&self) -> usize {
        self.total
    }

    pub fn len_of(&self, sample: usize) -> usize {
        self.lens[sample]
    }

    pub fn row(&self, sample: usize, t: usize) -> usize {
        debug_assert!(t < self.lens[sample]);
        self.offs[sample] + t
    }

    pub fn rows_of(&self, sample: usize) -> std::ops::Range<usize> {
        self.offs[sample]..self.offs[sample] + self.lens[sample]
    }

    fn step_row(&self, slot: usize, k: usize, reverse: bool) -> usize {
        let b = self.order[slot];
        let t = if reverse { self.lens[b] - 1 - k } else { k };
        self.offs[b] + t
    }
}

/// One direction of a GRU layer. Gate blocks are ordered (r, z, h).
#[derive(Debug, Clone, PartialEq)]
pub struct GruDir {
    /// input × 3H
    pub wx: Array2<f64>,
    /// H × 2H, recurrent weights of the r and z gates
    pub urz: Array2<f64>,
    /// H × H, recurrent weights of the candidate
    pub uh: Array2<f64>,
    /// 1 × 3H
    pub b: Array2<f64>,
}

pub(crate) struct DirCache {
    /// r, z and the candidate h̃ per row
    gates: Array2<f64>,
    hprev: Array2<f64>,
    rh: Array2<f64>,
    pub(crate) out: Array2<f64>,
}

impl GruDir {
    pub fn init(input: usize, hidden: usize, rng: &mut impl Rng) -> Self {
        let bx = 1.0 / (input as f64).sqrt();
        let bh = 1.0 / (hidden as f64).sqrt();
        GruDir {
            wx: uniform(input, 3 * hidden, bx, rng),
            urz: uniform(hidden, 2 * hidden, bh, rng),
            uh: uniform(hidden, hidden, bh, rng),
            b: Array2::zeros((1, 3 * hidden)),
        }
    }

    pub fn zeros_like(&self) -> Self {
        GruDir {
            wx: Array2::zeros(self.wx.raw_dim()),
            urz: Array2::zeros(self.urz.raw_dim()),
            uh: Array2::zeros(self.uh.raw_dim()),
            b: Array2::zeros(self.b.raw_dim()),
        }
    }

    pub fn hidden(&self) -> usize {
        self.uh.nrows()
    }

    /// A single cell update for one input vector.
    pub fn cell(&self, x: &[f64], h_prev: &[f64]) -> Vec<f64> {
        let h = self.hidden();
        let xv = ArrayView2::from_shape((1, x.len()), x).expect("input shape");
        let hv = ArrayView2::from_shape((1, h), h_prev).expect("state shape");
        let pre = xv.dot(&self.wx) + &self.b;
        let rz = hv.dot(&self.urz);
        let r: Vec<f64> = (0..h).map(|j| sigmoid(pre[[0, j]] + rz[[0, j]])).collect();
        let z: Vec<f64> = (0..h).map(|j| sigmoid(pre[[0, h + j]] + rz[[0, h + j]])).collect();
        let rh = Array2::from_shape_fn((1, h), |(_, j)| r[j] * h_prev[j]);
        let hh = rh.dot(&self.uh);
        (0..h)
            .map(|j| {
                let cand = (pre[[0, 2 * h + j]] + hh[[0, j]]).tanh();
                (1.0 - z[j]) * cand + z[j] * h_prev[j]
            })
            .collect()
    }

    pub(crate) fn forward(&self, x: &Array2<f64>, pk: &Packing, reverse: bool) -> DirCache {
        let h = self.hidden();
        let rows = x.nrows();
        let mut pre = x.dot(&self.wx);
        pre += &self.b;
        let mut gates = Array2::zeros((rows, 3 * h));
        let mut hprev = Array2::zeros((rows, h));
        let mut rh_all = Array2::zeros((rows, h));
        let mut out = Array2::zeros((rows, h));

        let bsz = pk.batch();
        let mut state = Array2::<f64>::zeros((bsz, h));
        let mut rz = Array2::<f64>::zeros((bsz, 2 * h));
        let mut rh = Array2::<f64>::zeros((bsz, h));
        let mut hh = Array2::<f64>::zeros((bsz, h));
        {
            let pre_s = pre.as_slice().expect("contiguous");
            let gates_s = gates.as_slice_mut().expect("contiguous");
            let hprev_s = hprev.as_slice_mut().expect("contiguous");
            let rh_all_s = rh_all.as_slice_mut().expect("contiguous");
            let out_s = out.as_slice_mut().expect("contiguous");
            for (k, &m) in pk.active.iter().enumerate() {
                general_mat_mul(1.0, &state.slice(s![..m, ..]), &self.urz, 0.0, &mut rz.slice_mut(s![..m, ..]));
                let st = state.as_slice().expect("contiguous");
                let rz_s = rz.as_slice().expect("contiguous");
                let rh_s = rh.as_slice_mut().expect("contiguous");
                for slot in 0..m {
                    let row = pk.step_row(slot, k, reverse);
                    let p = &pre_s[row * 3 * h..row * 3 * h + 2 * h];
                    let q = &rz_s[slot * 2 * h..(slot + 1) * 2 * h];
                    let hp = &st[slot * h..(slot + 1) * h];
                    let gr = &mut gates_s[row * 3 * h..row * 3 * h + 2 * h];
                    for j in 0..2 * h {
                        gr[j] = sigmoid(p[j] + q[j]);
                    }
                    hprev_s[row * h..(row + 1) * h].copy_from_slice(hp);
                    let rhr = &mut rh_s[slot * h..(slot + 1) * h];
                    for j in 0..h {
                        rhr[j] = gr[j] * hp[j];
                    }
                    rh_all_s[row * h..(row + 1) * h].copy_from_slice(rhr);
                }
                general_mat_mul(1.0, &rh.slice(s![..m, ..]), &self.uh, 0.0, &mut hh.slice_mut(s![..m, ..]));
                let hh_s = hh.as_slice().expect("contiguous");
                let st = state.as_slice_mut().expect("contiguous");
                for slot in 0..m {
                    let row = pk.step_row(slot, k, reverse);
                    let p = &pre_s[row * 3 * h + 2 * h..(row + 1) * 3 * h];
                    let q = &hh_s[slot * h..(slot + 1) * h];
                    let g = &mut gates_s[row * 3 * h..(row + 1) * 3 * h];
                    let (zs, cs) = g[h..].split_at_mut(h);
                    let hs = &mut st[slot * h..(slot + 1) * h];
                    let o = &mut out_s[row * h..(row + 1) * h];
                    for j in 0..h {
                        let cand = (p[j] + q[j]).tanh();
                        let z = zs[j];
                        let hn = (1.0 - z) * cand + z * hs[j];
                        cs[j] = cand;
                        o[j] = hn;
                        hs[j] = hn;
                    }
                }
            }
        }
        DirCache {
            gates,
            hprev,
            rh: rh_all,
            out,
        }
    }

    /// Accumulates parameter gradients into `g` and input gradients into `dx`.
    pub(crate) fn backward(
        &self,
        x: &Array2<f64>,
        cache: &DirCache,
        pk: &Packing,
        reverse: bool,
        d_out: ArrayView2<f64>,
        g: &mut GruDir,
        dx: &mut Array2<f64>,
    ) {
        let h = self.hidden();
        let rows = x.nrows();
        let bsz = pk.batch();
        let mut da = Array2::<f64>::zeros((rows, 3 * h));
        let mut ds = Array2::<f64>::zeros((bsz, h));
        let mut dah = Array2::<f64>::zeros((bsz, h));
        let mut drh = Array2::<f64>::zeros((bsz, h));
        let mut darz = Array2::<f64>::zeros((bsz, 2 * h));
        let (gates, hprev) = (&cache.gates, &cache.hprev);
        let uh_t = self.uh.t();
        let urz_t = self.urz.t();
        let gs = gates.as_slice().expect("contiguous");
        let hps = hprev.as_slice().expect("contiguous");
        let d_owned;
        let dos = match d_out.as_slice() {
            Some(v) => v,
            None => {
                d_owned = d_out.as_standard_layout().into_owned();
                d_owned.as_slice().expect("contiguous")
            }
        };

        for (k, &m) in pk.active.iter().enumerate().rev() {
            {
                let da_s = da.as_slice_mut().expect("contiguous");
                let ds_s = ds.as_slice_mut().expect("contiguous");
                let dah_s = dah.as_slice_mut().expect("contiguous");
                let darz_s = darz.as_slice_mut().expect("contiguous");
                for slot in 0..m {
                    let row = pk.step_row(slot, k, reverse);
                    let g = &gs[row * 3 * h..(row + 1) * 3 * h];
                    let hp = &hps[row * h..(row + 1) * h];
                    let dor = &dos[row * h..(row + 1) * h];
                    let dsr = &mut ds_s[slot * h..(slot + 1) * h];
                    let dahr = &mut dah_s[slot * h..(slot + 1) * h];
                    let dar = &mut da_s[row * 3 * h..(row + 1) * 3 * h];
                    let dzr = &mut darz_s[slot * 2 * h + h..(slot + 1) * 2 * h];
                    for j in 0..h {
                        let dh = dor[j] + dsr[j];
                        let z = g[h + j];
                        let cand = g[2 * h + j];
                        let daz = dh * (hp[j] - cand) * z * (1.0 - z);
                        let dach = dh * (1.0 - z) * (1.0 - cand * cand);
                        dsr[j] = dh * z;
                        dahr[j] = dach;
                        dar[2 * h + j] = dach;
                        dar[h + j] = daz;
                        dzr[j] = daz;
                    }
                }
            }
            general_mat_mul(1.0, &dah.slice(s![..m, ..]), &uh_t, 0.0, &mut drh.slice_mut(s![..m, ..]));
            {
                let da_s = da.as_slice_mut().expect("contiguous");
                let ds_s = ds.as_slice_mut().expect("contiguous");
                let drh_s = drh.as_slice().expect("contiguous");
                let darz_s = darz.as_slice_mut().expect("contiguous");
                for slot in 0..m {
                    let row = pk.step_row(slot, k, reverse);
                    let g = &gs[row * 3 * h..row * 3 * h + h];
                    let hp = &hps[row * h..(row + 1) * h];
                    let drr = &drh_s[slot * h..(slot + 1) * h];
                    let dsr = &mut ds_s[slot * h..(slot + 1) * h];
                    let dar = &mut da_s[row * 3 * h..row * 3 * h + h];
                    let drz = &mut darz_s[slot * 2 * h..slot * 2 * h + h];
                    for j in 0..h {
                        let r = g[j];
                        let v = drr[j] * hp[j] * r * (1.0 - r);
                        dsr[j] += drr[j] * r;
                        dar[j] = v;
                        drz[j] = v;
                    }
                }
            }
            general_mat_mul(1.0, &darz.slice(s![..m, ..]), &urz_t, 1.0, &mut ds.slice_mut(s![..m, ..]));
        }

        general_mat_mul(1.0, &x.t(), &da, 1.0, &mut g.wx);
        general_mat_mul(1.0, &hprev.t(), &da.slice(s![.., ..2 * h]), 1.0, &mut g.urz);
        general_mat_mul(1.0, &cache.rh.t(), &da.slice(s![.., 2 * h..]), 1.0, &mut g.uh);
        g.b += &da.sum_axis(Axis(0)).insert_axis(Axis(0));
        general_mat_mul(1.0, &da, &self.wx.t(), 1.0, dx);
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct BiLayer {
    pub fwd: GruDir,
    pub bwd: GruDir,
}

/// A stack of bidirectional GRU layers; each layer emits 2H per step.
#[derive(Debug, Clone, PartialEq)]
pub struct BiGru {
    pub layers: Vec<BiLayer>,
}

pub(crate) struct BiGruCache {
    inputs: Vec<Array2<f64>>,
    dirs: Vec<(DirCache, DirCache)>,
    pub(crate) out: Array2<f64>,
}

impl BiGru {
    pub fn init(input: usize, hidden: usize, layers: usize, rng: &mut impl Rng) -> Self {
        let layers = (0..layers)
            .map(|l| {
                let inp = if l == 0 { input } else { 2 * hidden };
                BiLayer {
                    fwd: GruDir::init(inp, hidden, rng),
                    bwd: GruDir::init(inp, hidden, rng),
                }
            })
            .collect();
        BiGru { layers }
    }

    pub fn zeros_like(&self) -> Self {
        BiGru {
            layers: self
                .layers
                .iter()
                .map(|l| BiLayer {
                    fwd: l.fwd.zeros_like(),
                    bwd: l.bwd.zeros_like(),
                })
                .collect(),
        }
    }

    pub fn hidden(&self) -> usize {
        self.layers[0].fwd.hidden()
    }

    pub fn input_dim(&self) -> usize {
        self.layers[0].fwd.wx.nrows()
    }

    pub(crate) fn forward(&self, x: Array2<f64>, pk: &Packing) -> BiGruCache {
        let h = self.hidden();
        let mut inputs = Vec::with_capacity(self.layers.len());
        let mut dirs = Vec::with_capacity(self.layers.len());
        let mut cur = x;
        for layer in &self.layers {
            let f = layer.fwd.forward(&cur, pk, false);
            let b = layer.bwd.forward(&cur, pk, true);
            let mut out = Array2::zeros((cur.nrows(), 2 * h));
            out.slice_mut(s![.., ..h]).assign(&f.out);
            out.slice_mut(s![.., h..]).assign(&b.out);
            inputs.push(cur);
            dirs.push((f, b));
            cur = out;
        }
        BiGruCache {
            inputs,
            dirs,
            out: cur,
        }
    }

    /// Returns the gradient with respect to the stack input.
    pub(crate) fn backward(&self, cache: &BiGruCache, pk: &Packing, d_out: Array2<f64>, g: &mut BiGru) -> Array2<f64> {
        let h = self.hidden();
        let mut d = d_out;
        for (l, layer) in self.layers.iter().enumerate().rev() {
            let x = &cache.inputs[l];
            let (f, b) = &cache.dirs[l];
            let mut dx = Array2::zeros(x.raw_dim());
            let gl = &mut g.layers[l];
            layer.fwd.backward(x, f, pk, false, d.slice(s![.., ..h]), &mut gl.fwd, &mut dx);
            layer.bwd.backward(x, b, pk, true, d.slice(s![.., h..]), &mut gl.bwd, &mut dx);
            d = dx;
        }
        d
    }
}

/// y = x·W + b
#[derive(Debug, Clone, PartialEq)]
pub struct Linear {
    pub w: Array2<f64>,
    pub b: Array2<f64>,
}

impl Linear {
    pub fn init(input: usize, output: usize, rng: &mut impl Rng) -> Self {
        Linear {
            w: uniform(input, output, 1.0 / (input as f64).sqrt(), rng),
            b: Array2::zeros((1, output)),
        }
    }

    pub fn zeros_like(&self) -> Self {
        Linear {
            w: Array2::zeros(self.w.raw_dim()),
            b: Array2::zeros(self.b.raw_dim()),
        }
    }

    pub fn forward(&self, x: &Array2<f64>) -> Array2<f64> {
        x.dot(&self.w) + &self.b
    }

    pub(crate) fn backward(&self, x: &Array2<f64>, dy: &Array2<f64>, g: &mut Linear) -> Array2<f64> {
        general_mat_mul(1.0, &x.t(), dy, 1.0, &mut g.w);
        g.b += &dy.sum_axis(Axis(0)).insert_axis(Axis(0));
        dy.dot(&self.w.t())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn zero_cell_halves_state() {
        let dir = GruDir::init(2, 3, &mut ChaCha8Rng::seed_from_u64(1)).zeros_like();
        let v = [0.4, -0.8, 0.1];
        assert_eq!(dir.cell(&[1.0, 2.0], &v), vec![0.2, -0.4, 0.05]);
        assert_eq!(dir.cell(&[1.0, 2.0], &[0.0; 3]), vec![0.0; 3]);
    }

    #[test]
    fn cell_output_stays_bounded() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let dir = GruDir::init(4, 5, &mut rng);
        for _ in 0..200 {
            let x: Vec<f64> = (0..4).map(|_| rng.random_range(-50.0..50.0)).collect();
            let hp: Vec<f64> = (0..5).map(|_| rng.random_range(-3.0..3.0)).collect();
            let bound = hp.iter().fold(1.0f64, |m, v| m.max(v.abs()));
            assert!(dir.cell(&x, &hp).iter().all(|v| v.abs() <= bound));
        }
    }

    #[test]
    fn packed_forward_matches_cell_loop() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let dir = GruDir::init(2, 3, &mut rng);
        let lens = [2, 4, 1];
        let pk = Packing::new(&lens);
        let x = uniform(pk.total(), 2, 1.0, &mut rng);
        for reverse in [false, true] {
            let cache = dir.forward(&x, &pk, reverse);
            for (b, &len) in lens.iter().enumerate() {
                let mut h = vec![0.0; 3];
                let steps: Vec<usize> = if reverse { (0..len).rev().collect() } else { (0..len).collect() };
                for t in steps {
                    let row = pk.row(b, t);
                    h = dir.cell(x.row(row).as_slice().unwrap(), &h);
                    for j in 0..3 {
                        assert!((cache.out[[row, j]] - h[j]).abs() < 1e-12);
                    }
                }
            }
        }
    }
}
