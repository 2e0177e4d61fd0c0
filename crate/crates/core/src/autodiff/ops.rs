use super::tape::{for_each_head_row, gelu, Op, Tape, Var};
use crate::error::{Error, Result};
use crate::rng::Rng;
use crate::scalar::Scalar;
use crate::tensor::Tensor;

fn out<T: Scalar>(shape: &[usize], data: Vec<T>) -> Tensor<T> {
    Tensor::new(shape, data).expect("op produced a consistent shape")
}

impl<T: Scalar> Tape<T> {
    /// `[r,k] · [k,c] -> [r,c]`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.matmul_impl(a, b, false)
    }

    /// `[r,k] · [c,k]ᵀ -> [r,c]`.
    pub fn matmul_t(&mut self, a: Var, b: Var) -> Result<Var> {
        self.matmul_impl(a, b, true)
    }

    fn matmul_impl(&mut self, a: Var, b: Var, trans_b: bool) -> Result<Var> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        if sa.len() != 2 || sb.len() != 2 {
            return Err(Error::dim("matmul", &sa, &sb));
        }
        let (r, k) = (sa[0], sa[1]);
        let (kb, c) = if trans_b { (sb[1], sb[0]) } else { (sb[0], sb[1]) };
        if k != kb {
            return Err(Error::dim("matmul", &sa, &sb));
        }
        let mut data = vec![T::zero(); r * c];
        let (rs, cs) = if trans_b { (1, k as isize) } else { (c as isize, 1) };
        T::gemm(r, k, c, T::one(), self.data(a), k as isize, 1, self.data(b), rs, cs, T::zero(), &mut data, c as isize, 1);
        Ok(self.push(out(&[r, c], data), Op::MatMul { a, b, trans_b }, &[a, b]))
    }

    /// Batched `[B,r,k] · [B,k,c] -> [B,r,c]`.
    pub fn bmm(&mut self, a: Var, b: Var) -> Result<Var> {
        self.bmm_impl(a, b, false)
    }

    /// Batched `[B,r,k] · [B,c,k]ᵀ -> [B,r,c]`.
    pub fn bmm_t(&mut self, a: Var, b: Var) -> Result<Var> {
        self.bmm_impl(a, b, true)
    }

    fn bmm_impl(&mut self, a: Var, b: Var, trans_b: bool) -> Result<Var> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        if sa.len() != 3 || sb.len() != 3 || sa[0] != sb[0] {
            return Err(Error::dim("bmm", &sa, &sb));
        }
        let (bs, r, k) = (sa[0], sa[1], sa[2]);
        let (kb, c) = if trans_b { (sb[2], sb[1]) } else { (sb[1], sb[2]) };
        if k != kb {
            return Err(Error::dim("bmm", &sa, &sb));
        }
        let mut data = vec![T::zero(); bs * r * c];
        let (rs, cs) = if trans_b { (1, k as isize) } else { (c as isize, 1) };
        {
            let (ad, bd) = (self.data(a), self.data(b));
            for bi in 0..bs {
                T::gemm(
                    r, k, c, T::one(),
                    &ad[bi * r * k..(bi + 1) * r * k], k as isize, 1,
                    &bd[bi * k * c..(bi + 1) * k * c], rs, cs,
                    T::zero(), &mut data[bi * r * c..(bi + 1) * r * c], c as isize, 1,
                );
            }
        }
        Ok(self.push(out(&[bs, r, c], data), Op::Bmm { a, b, trans_b }, &[a, b]))
    }

    /// `x + bias`, broadcasting `bias [d]` over the last dimension of `x`.
    pub fn add_bias(&mut self, x: Var, bias: Var) -> Result<Var> {
        let (sx, sb) = (self.shape(x).to_vec(), self.shape(bias).to_vec());
        let d = *sx.last().unwrap();
        if sb.len() != 1 || sb[0] != d {
            return Err(Error::dim("add_bias", &sx, &sb));
        }
        let bd = self.data(bias).to_vec();
        let mut data = self.data(x).to_vec();
        for row in data.chunks_exact_mut(d) {
            row.iter_mut().zip(&bd).for_each(|(v, &b)| *v += b);
        }
        Ok(self.push(out(&sx, data), Op::AddBias { x, bias }, &[x, bias]))
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<Vec<usize>> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa != sb {
            return Err(Error::dim(op, sa, sb));
        }
        Ok(sa.to_vec())
    }

    fn zip_with(&self, a: Var, b: Var, f: impl Fn(T, T) -> T) -> Vec<T> {
        self.data(a).iter().zip(self.data(b)).map(|(&x, &y)| f(x, y)).collect()
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let s = self.same_shape("add", a, b)?;
        let data = self.zip_with(a, b, |x, y| x + y);
        Ok(self.push(out(&s, data), Op::Add { a, b }, &[a, b]))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let s = self.same_shape("sub", a, b)?;
        let data = self.zip_with(a, b, |x, y| x - y);
        Ok(self.push(out(&s, data), Op::Sub { a, b }, &[a, b]))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let s = self.same_shape("mul", a, b)?;
        let data = self.zip_with(a, b, |x, y| x * y);
        Ok(self.push(out(&s, data), Op::Mul { a, b }, &[a, b]))
    }

    pub fn scale(&mut self, x: Var, s: T) -> Var {
        let shape = self.shape(x).to_vec();
        let data = self.data(x).iter().map(|&v| v * s).collect();
        self.push(out(&shape, data), Op::Scale { x, s }, &[x])
    }

    pub fn gelu(&mut self, x: Var) -> Var {
        let shape = self.shape(x).to_vec();
        let data = self.data(x).iter().map(|&v| gelu(v)).collect();
        self.push(out(&shape, data), Op::Gelu { x }, &[x])
    }

    pub fn exp(&mut self, x: Var) -> Var {
        let shape = self.shape(x).to_vec();
        let data = self.data(x).iter().map(|&v| v.exp()).collect();
        self.push(out(&shape, data), Op::Exp { x }, &[x])
    }

    /// Normalises each last-dim slice to zero mean and unit variance, then
    /// applies `gain ⊙ · + bias`.
    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var, eps: T) -> Result<Var> {
        let sx = self.shape(x).to_vec();
        let d = *sx.last().unwrap();
        for p in [gain, bias] {
            if self.shape(p) != [d] {
                return Err(Error::dim("layer_norm", &sx, self.shape(p)));
            }
        }
        let rows = self.value(x).len() / d;
        let inv_d = T::one() / T::from_usize(d).unwrap();
        let (gd, bd) = (self.data(gain).to_vec(), self.data(bias).to_vec());
        let mut xhat = vec![T::zero(); rows * d];
        let mut rstd = vec![T::zero(); rows];
        let mut data = vec![T::zero(); rows * d];
        for (r, xr) in self.data(x).chunks_exact(d).enumerate() {
            let mean = xr.iter().copied().sum::<T>() * inv_d;
            let var = xr.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() * inv_d;
            let rs = T::one() / (var + eps).sqrt();
            rstd[r] = rs;
            for j in 0..d {
                let h = (xr[j] - mean) * rs;
                xhat[r * d + j] = h;
                data[r * d + j] = gd[j] * h + bd[j];
            }
        }
        Ok(self.push(out(&sx, data), Op::LayerNorm { x, gain, bias, xhat, rstd }, &[x, gain, bias]))
    }

    /// Softmax over the last dimension with max-subtraction.
    pub fn softmax_lastdim(&mut self, x: Var) -> Var {
        let shape = self.shape(x).to_vec();
        let c = *shape.last().unwrap();
        let mut data = self.data(x).to_vec();
        for row in data.chunks_exact_mut(c) {
            softmax_row(row, None);
        }
        self.push(out(&shape, data), Op::Softmax { x }, &[x])
    }

    /// Softmax over the last dimension where keys with `key_mask == false`
    /// receive probability exactly zero. Row `r` uses mask slice
    /// `r / rows_per_slice`.
    pub fn masked_softmax(&mut self, x: Var, key_mask: &[bool], rows_per_slice: usize) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        let c = *shape.last().unwrap();
        let rows = self.value(x).len() / c;
        if rows_per_slice == 0 || key_mask.len() * rows_per_slice != rows * c {
            return Err(Error::dim("masked_softmax", &shape, &[key_mask.len(), rows_per_slice]));
        }
        let mut data = self.data(x).to_vec();
        for (r, row) in data.chunks_exact_mut(c).enumerate() {
            let s = r / rows_per_slice;
            softmax_row(row, Some(&key_mask[s * c..(s + 1) * c]));
        }
        Ok(self.push(out(&shape, data), Op::Softmax { x }, &[x]))
    }

    pub fn log_softmax(&mut self, x: Var) -> Var {
        let shape = self.shape(x).to_vec();
        let c = *shape.last().unwrap();
        let mut data = self.data(x).to_vec();
        for row in data.chunks_exact_mut(c) {
            let max = row.iter().copied().fold(T::neg_infinity(), T::max);
            let lse = max + row.iter().map(|&v| (v - max).exp()).sum::<T>().ln();
            row.iter_mut().for_each(|v| *v -= lse);
        }
        self.push(out(&shape, data), Op::LogSoftmax { x }, &[x])
    }

    /// `[n*m, heads*dh] -> [n*heads, m, dh]`.
    pub fn split_heads(&mut self, x: Var, n: usize, m: usize, heads: usize) -> Result<Var> {
        let s = self.shape(x).to_vec();
        if s.len() != 2 || s[0] != n * m || !s[1].is_multiple_of(heads) {
            return Err(Error::dim("split_heads", &s, &[n, m, heads]));
        }
        let dh = s[1] / heads;
        let src = self.data(x);
        let mut data = vec![T::zero(); src.len()];
        for_each_head_row(n, m, heads, dh, |flat, split| {
            data[split..split + dh].copy_from_slice(&src[flat..flat + dh]);
        });
        Ok(self.push(out(&[n * heads, m, dh], data), Op::SplitHeads { x, n, m, heads }, &[x]))
    }

    /// `[n*heads, m, dh] -> [n*m, heads*dh]`.
    pub fn merge_heads(&mut self, x: Var, n: usize, m: usize, heads: usize) -> Result<Var> {
        let s = self.shape(x).to_vec();
        if s.len() != 3 || s[0] != n * heads || s[1] != m {
            return Err(Error::dim("merge_heads", &s, &[n, m, heads]));
        }
        let dh = s[2];
        let src = self.data(x);
        let mut data = vec![T::zero(); src.len()];
        for_each_head_row(n, m, heads, dh, |flat, split| {
            data[flat..flat + dh].copy_from_slice(&src[split..split + dh]);
        });
        Ok(self.push(out(&[n * m, heads * dh], data), Op::MergeHeads { x, n, m, heads }, &[x]))
    }

    /// Relative-position scores: `out[b,i,j] = q[b,i,:] · r[b % heads, buckets[i*m+j], :]`.
    ///
    /// `q: [B, m, dh]`, `r: [heads, nb, dh]`, `buckets: [m*m]` with entries `< nb`.
    pub fn rel_scores(&mut self, q: Var, r: Var, buckets: Vec<usize>, heads: usize) -> Result<Var> {
        let (sq, sr) = (self.shape(q).to_vec(), self.shape(r).to_vec());
        if sq.len() != 3 || sr.len() != 3 || sr[0] != heads || sq[2] != sr[2] || sq[0] % heads != 0 {
            return Err(Error::dim("rel_scores", &sq, &sr));
        }
        let (bs, m, dh) = (sq[0], sq[1], sq[2]);
        let nb = sr[1];
        if buckets.len() != m * m || buckets.iter().any(|&b| b >= nb) {
            return Err(Error::dim("rel_scores", &sq, &[buckets.len(), nb]));
        }
        let mut data = vec![T::zero(); bs * m * m];
        let mut full = vec![T::zero(); m * nb];
        {
            let (qd, rd) = (self.data(q), self.data(r));
            for b in 0..bs {
                let h = b % heads;
                T::gemm(
                    m, dh, nb, T::one(),
                    &qd[b * m * dh..(b + 1) * m * dh], dh as isize, 1,
                    &rd[h * nb * dh..(h + 1) * nb * dh], 1, dh as isize,
                    T::zero(), &mut full, nb as isize, 1,
                );
                let ob = &mut data[b * m * m..(b + 1) * m * m];
                for i in 0..m {
                    for j in 0..m {
                        ob[i * m + j] = full[i * nb + buckets[i * m + j]];
                    }
                }
            }
        }
        Ok(self.push(out(&[bs, m, m], data), Op::RelScores { q, r, buckets, heads }, &[q, r]))
    }

    /// `[B,p,q] -> [B,q,p]`.
    pub fn transpose_last2(&mut self, x: Var) -> Result<Var> {
        let s = self.shape(x).to_vec();
        if s.len() != 3 {
            return Err(Error::Rank(format!("transpose_last2 needs rank 3, got {s:?}")));
        }
        let (bs, p, q) = (s[0], s[1], s[2]);
        let src = self.data(x);
        let mut data = vec![T::zero(); src.len()];
        for b in 0..bs {
            for a in 0..p {
                for c in 0..q {
                    data[b * p * q + c * p + a] = src[b * p * q + a * q + c];
                }
            }
        }
        Ok(self.push(out(&[bs, q, p], data), Op::TransposeLast2 { x }, &[x]))
    }

    /// Rows `idx` of a `[R, d]` table, as `[idx.len(), d]`.
    pub fn gather_rows(&mut self, table: Var, idx: &[usize]) -> Result<Var> {
        let s = self.shape(table).to_vec();
        if s.len() != 2 || idx.is_empty() {
            return Err(Error::dim("gather_rows", &s, &[idx.len()]));
        }
        let d = s[1];
        if let Some(&bad) = idx.iter().find(|&&i| i >= s[0]) {
            return Err(Error::dim("gather_rows", &s, &[bad]));
        }
        let src = self.data(table);
        let mut data = Vec::with_capacity(idx.len() * d);
        for &i in idx {
            data.extend_from_slice(&src[i * d..(i + 1) * d]);
        }
        Ok(self.push(out(&[idx.len(), d], data), Op::GatherRows { table, idx: idx.to_vec() }, &[table]))
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let t = self.value(x).clone().reshaped(shape)?;
        Ok(self.push(t, Op::Reshape { x }, &[x]))
    }

    /// Inverted dropout. `p == 0` records nothing and returns `x`.
    pub fn dropout(&mut self, x: Var, p: f64, rng: &mut Rng) -> Var {
        if p <= 0.0 {
            return x;
        }
        use rand::Rng as _;
        let keep = T::from_f64_lossy(1.0 / (1.0 - p));
        let shape = self.shape(x).to_vec();
        let mask: Vec<T> = (0..self.value(x).len())
            .map(|_| if rng.gen::<f64>() < p { T::zero() } else { keep })
            .collect();
        let data = self.data(x).iter().zip(&mask).map(|(&v, &m)| v * m).collect();
        self.push(out(&shape, data), Op::Dropout { x, mask }, &[x])
    }

    /// Mean over rows with `mask[i]` of `-log softmax(logits[i])[labels[i]]`.
    pub fn cross_entropy(&mut self, logits: Var, labels: &[usize], mask: &[bool]) -> Result<Var> {
        let s = self.shape(logits).to_vec();
        if s.len() != 2 || labels.len() != s[0] || mask.len() != s[0] {
            return Err(Error::dim("cross_entropy", &s, &[labels.len(), mask.len()]));
        }
        let c = s[1];
        if let Some((i, &l)) = labels.iter().enumerate().find(|(i, &l)| mask[*i] && l >= c) {
            return Err(Error::Data(format!("label {l} at row {i} outside {c} classes")));
        }
        let count = mask.iter().filter(|&&m| m).count();
        if count == 0 {
            return Err(Error::EmptySupervision("cross_entropy"));
        }
        let mut probs = vec![T::zero(); s[0] * c];
        let mut total = T::zero();
        for (row, xr) in self.data(logits).chunks_exact(c).enumerate() {
            let (amax, max) = xr
                .iter()
                .copied()
                .enumerate()
                .fold((0, T::neg_infinity()), |acc, (j, v)| if v > acc.1 { (j, v) } else { acc });
            let mut others = T::zero();
            for (j, &v) in xr.iter().enumerate() {
                let e = (v - max).exp();
                probs[row * c + j] = e;
                if j != amax {
                    others += e;
                }
            }
            let z = T::one() + others;
            probs[row * c..(row + 1) * c].iter_mut().for_each(|p| *p /= z);
            if mask[row] {
                // log-sum-exp minus the label logit, with log1p for the
                // saturated regime.
                total += max - xr[labels[row]] + others.ln_1p();
            }
        }
        let loss = total / T::from_usize(count).unwrap();
        Ok(self.push(
            Tensor::scalar(loss),
            Op::CrossEntropy { logits, labels: labels.to_vec(), mask: mask.to_vec(), probs, count },
            &[logits],
        ))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let v = self.value(x).sum();
        self.push(Tensor::scalar(v), Op::Sum { x }, &[x])
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let t = self.value(x);
        let v = t.sum() / T::from_usize(t.len()).unwrap();
        self.push(Tensor::scalar(v), Op::Mean { x }, &[x])
    }

    /// Scales each last-dim row to unit Euclidean norm; zero rows are an error.
    pub fn normalize_rows(&mut self, x: Var) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        let d = *shape.last().unwrap();
        let mut norms = Vec::new();
        let mut data = self.data(x).to_vec();
        for (r, row) in data.chunks_exact_mut(d).enumerate() {
            let n = row.iter().map(|&v| v * v).sum::<T>().sqrt();
            if !(n > T::zero()) {
                return Err(Error::DegenerateRepresentation { side: "input", row: r });
            }
            row.iter_mut().for_each(|v| *v /= n);
            norms.push(n);
        }
        Ok(self.push(out(&shape, data), Op::NormalizeRows { x, norms }, &[x]))
    }
}

/// In-place softmax of one row; masked-out entries become exactly zero.
pub(crate) fn softmax_row<T: Scalar>(row: &mut [T], mask: Option<&[bool]>) {
    let on = |j: usize| mask.is_none_or(|m| m[j]);
    let max = row
        .iter()
        .enumerate()
        .filter(|(j, _)| on(*j))
        .map(|(_, &v)| v)
        .fold(T::neg_infinity(), T::max);
    if max == T::neg_infinity() {
        row.iter_mut().for_each(|v| *v = T::zero());
        return;
    }
    let mut z = T::zero();
    for (j, v) in row.iter_mut().enumerate() {
        *v = if on(j) { (*v - max).exp() } else { T::zero() };
        z += *v;
    }
    row.iter_mut().for_each(|v| *v /= z);
}
