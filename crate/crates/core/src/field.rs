//! The voxelized scene representation.
//!
//! All learnable parameters live on the vertices of a dense lattice: a raw
//! density logit, RGB logits, four view-rescale coefficients, a rigidity
//! logit, and the Bezier control-point offsets. Queries trilinearly blend the
//! raw parameters of the eight enclosing vertices and apply the
//! nonlinearities afterwards, so interpolation stays linear in the
//! parameters. Points outside the bounding box read as empty space.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use crate::error::{Error, Result};
use crate::float::{real, sigmoid, softplus, Real};
use crate::math::Vec3;
use crate::spline::{
    self, bernstein_weights, canonicalize_in_place, CanonicalMode, ControlPolygon, MAX_ORDER,
};

/// Channel index of the raw density logit.
pub const CH_DENSITY: usize = 0;
/// First of three RGB logit channels.
pub const CH_RGB: usize = 1;
/// First of four view-rescale coefficient channels.
pub const CH_SH: usize = 4;
/// Channel index of the rigidity logit.
pub const CH_RIGIDITY: usize = 8;
/// First control-point offset channel; point `p` axis `a` is `CH_OFFSETS + 3*p + a`.
pub const CH_OFFSETS: usize = 9;

/// Magic bytes of the checkpoint format.
pub const CHECKPOINT_MAGIC: &[u8; 4] = b"SPLF";
/// Current checkpoint format version.
pub const CHECKPOINT_VERSION: u32 = 1;

/// Axis-aligned world-space bounding box.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Aabb<T> {
    pub min: Vec3<T>,
    pub max: Vec3<T>,
}

impl<T: Real> Aabb<T> {
    pub fn new(min: Vec3<T>, max: Vec3<T>) -> Self {
        Self { min, max }
    }

    /// Cube centered on the origin with the given half-extent.
    pub fn cube(half: T) -> Self {
        Self {
            min: Vec3::splat(-half),
            max: Vec3::splat(half),
        }
    }

    pub fn extent(&self) -> Vec3<T> {
        self.max - self.min
    }

    pub fn contains(&self, p: Vec3<T>) -> bool {
        p.x >= self.min.x
            && p.y >= self.min.y
            && p.z >= self.min.z
            && p.x <= self.max.x
            && p.y <= self.max.y
            && p.z <= self.max.z
    }
}

/// Degree-1 real spherical-harmonic direction basis (DC, y, z, x order).
///
/// Normalization constants are absorbed into the stored coefficients, so the
/// DC component is exactly 1.
#[inline]
pub fn sh_basis<T: Real>(dir: Vec3<T>) -> [T; 4] {
    [T::one(), dir.y, dir.z, dir.x]
}

/// The eight enclosing lattice vertices of a query point, with their blend
/// weights and the cell-local derivative scale.
#[derive(Clone, Debug)]
pub struct Stencil<T> {
    /// Vertex indices, corner k has x-bit k&1, y-bit k>>1&1, z-bit k>>2&1.
    pub verts: [usize; 8],
    /// Trilinear blend weights, summing to 1.
    pub weights: [T; 8],
    wx: [T; 2],
    wy: [T; 2],
    wz: [T; 2],
    inv_cell: Vec3<T>,
}

impl<T: Real> Stencil<T> {
    /// Blends one channel of raw parameters.
    #[inline]
    pub fn gather(&self, channel: &[T]) -> T {
        let mut acc = T::zero();
        for k in 0..8 {
            acc += self.weights[k] * channel[self.verts[k]];
        }
        acc
    }

    /// World-space gradient of the blended value.
    #[inline]
    pub fn gather_grad(&self, channel: &[T]) -> Vec3<T> {
        let mut g = Vec3::zero();
        for (k, &v) in self.verts.iter().enumerate() {
            let val = channel[v];
            let (bx, by, bz) = (k & 1, (k >> 1) & 1, (k >> 2) & 1);
            let sx = if bx == 1 { T::one() } else { -T::one() };
            let sy = if by == 1 { T::one() } else { -T::one() };
            let sz = if bz == 1 { T::one() } else { -T::one() };
            g.x += sx * self.wy[by] * self.wz[bz] * val;
            g.y += sy * self.wx[bx] * self.wz[bz] * val;
            g.z += sz * self.wx[bx] * self.wy[by] * val;
        }
        g.mul_elem(self.inv_cell)
    }

    /// Accumulates `d` into the eight vertices of one channel of a gradient
    /// buffer laid out like the grid parameters.
    #[inline]
    pub fn scatter(&self, grads: &mut [T], channel_base: usize, d: T) {
        for k in 0..8 {
            grads[channel_base + self.verts[k]] += self.weights[k] * d;
        }
    }
}

/// Deformation query result at one point.
#[derive(Clone, Debug)]
pub struct DeformationSample<T> {
    /// Final deformation, `rigidity * delta0`.
    pub delta: Vec3<T>,
    /// Spline deformation before the rigidity rescale.
    pub delta0: Vec3<T>,
    /// Rigidity in [0, 1].
    pub rigidity: T,
    /// Canonicalized control polygon interpolated at the query point.
    pub beta: ControlPolygon<T>,
}

/// Lightweight deformation result used on the hot rendering path.
#[derive(Clone, Copy, Debug, Default)]
pub(crate) struct DeformEval<T> {
    pub delta: Vec3<T>,
    pub delta0: Vec3<T>,
    pub rigidity: T,
}

/// Dense voxel grid of learnable scene parameters.
///
/// Parameters are stored channel-major: channel `c` occupies
/// `params[c*n_verts .. (c+1)*n_verts]` in x-fastest vertex order, matching
/// the checkpoint layout byte for byte.
#[derive(Clone, Debug)]
pub struct VoxelGrid<T> {
    res: [usize; 3],
    aabb: Aabb<T>,
    order: usize,
    params: Vec<T>,
}

impl<T: Real> VoxelGrid<T> {
    /// Builds a freshly initialized grid: low density, mid-gray color, a
    /// mostly-rigid start, zero motion, and a near-identity view rescale.
    ///
    /// `seed` is reserved for optional initialization noise (off by default);
    /// initialization is deterministic for a fixed seed either way.
    pub fn init(res: [usize; 3], aabb: Aabb<T>, order: usize, seed: u64) -> Result<Self> {
        let _ = seed;
        if res.iter().any(|&r| r < 2) {
            return Err(Error::InvalidGrid(format!(
                "resolution must be >= 2 per axis, got {res:?}"
            )));
        }
        if !(2..=MAX_ORDER).contains(&order) {
            return Err(Error::InvalidGrid(format!(
                "spline order must be in 2..={MAX_ORDER}, got {order}"
            )));
        }
        let ext = aabb.extent();
        if !(aabb.min.is_finite() && aabb.max.is_finite())
            || ext.x <= T::zero()
            || ext.y <= T::zero()
            || ext.z <= T::zero()
        {
            return Err(Error::InvalidGrid("aabb must satisfy min < max".into()));
        }

        let mut grid = Self {
            res,
            aabb,
            order,
            params: vec![T::zero(); (9 + 3 * order) * (res[0] + 1) * (res[1] + 1) * (res[2] + 1)],
        };
        grid.channel_mut(CH_DENSITY).fill(real(-1.0));
        grid.channel_mut(CH_RIGIDITY).fill(real(-2.0));
        grid.channel_mut(CH_SH).fill(real(-4.0));
        Ok(grid)
    }

    pub fn resolution(&self) -> [usize; 3] {
        self.res
    }

    pub fn aabb(&self) -> Aabb<T> {
        self.aabb
    }

    /// Control points per voxel-stored curve.
    pub fn order(&self) -> usize {
        self.order
    }

    /// Vertex lattice dimensions, `resolution + 1` per axis.
    pub fn vertex_dims(&self) -> [usize; 3] {
        [self.res[0] + 1, self.res[1] + 1, self.res[2] + 1]
    }

    pub fn n_verts(&self) -> usize {
        let d = self.vertex_dims();
        d[0] * d[1] * d[2]
    }

    pub fn n_channels(&self) -> usize {
        9 + 3 * self.order
    }

    pub fn n_params(&self) -> usize {
        self.params.len()
    }

    pub fn params(&self) -> &[T] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [T] {
        &mut self.params
    }

    #[inline]
    pub fn vertex_index(&self, x: usize, y: usize, z: usize) -> usize {
        let d = self.vertex_dims();
        (z * d[1] + y) * d[0] + x
    }

    #[inline]
    pub fn param_index(&self, channel: usize, vertex: usize) -> usize {
        channel * self.n_verts() + vertex
    }

    #[inline]
    pub fn channel(&self, c: usize) -> &[T] {
        let n = self.n_verts();
        &self.params[c * n..(c + 1) * n]
    }

    #[inline]
    pub fn channel_mut(&mut self, c: usize) -> &mut [T] {
        let n = self.n_verts();
        &mut self.params[c * n..(c + 1) * n]
    }

    /// Human-readable name of a parameter channel, for diagnostics.
    pub fn channel_name(&self, c: usize) -> String {
        match c {
            CH_DENSITY => "density_raw".into(),
            1..=3 => format!("rgb_logits.{}", ["r", "g", "b"][c - CH_RGB]),
            4..=7 => format!("sh_coeffs[{}]", c - CH_SH),
            CH_RIGIDITY => "rigidity_logit".into(),
            _ => {
                let o = c - CH_OFFSETS;
                format!("ctrl_offsets[{}].{}", o / 3, ["x", "y", "z"][o % 3])
            }
        }
    }

    /// Describes a flat parameter index as channel @ vertex.
    pub fn describe_param(&self, idx: usize) -> String {
        let n = self.n_verts();
        let (c, v) = (idx / n, idx % n);
        let d = self.vertex_dims();
        let (x, y, z) = (v % d[0], (v / d[0]) % d[1], v / (d[0] * d[1]));
        format!("{} @ vertex ({x},{y},{z})", self.channel_name(c))
    }

    /// World-space size of one cell.
    pub fn cell_size(&self) -> Vec3<T> {
        let e = self.aabb.extent();
        Vec3::new(
            e.x / real(self.res[0] as f64),
            e.y / real(self.res[1] as f64),
            e.z / real(self.res[2] as f64),
        )
    }

    /// Trilinear stencil for a world-space point; `None` outside the box.
    pub fn stencil(&self, p: Vec3<T>) -> Option<Stencil<T>> {
        if !self.aabb.contains(p) {
            return None;
        }
        let ext = self.aabb.extent();
        let mut cell = [0usize; 3];
        let mut frac = Vec3::zero();
        for a in 0..3 {
            let n = self.res[a];
            let u = (p.axis(a) - self.aabb.min.axis(a)) / ext.axis(a) * real(n as f64);
            let c = u.floor().to_f64().unwrap() as usize;
            let c = c.min(n - 1);
            cell[a] = c;
            frac.set_axis(a, u - real(c as f64));
        }
        Some(self.stencil_at_cell(cell, frac))
    }

    /// Stencil for explicit cell coordinates and cell-local fractions.
    ///
    /// Exposed so boundary continuity can be checked by evaluating the same
    /// world point from both adjacent cells.
    pub fn stencil_at_cell(&self, cell: [usize; 3], frac: Vec3<T>) -> Stencil<T> {
        let one = T::one();
        let wx = [one - frac.x, frac.x];
        let wy = [one - frac.y, frac.y];
        let wz = [one - frac.z, frac.z];
        let mut verts = [0usize; 8];
        let mut weights = [T::zero(); 8];
        for (k, (v, w)) in verts.iter_mut().zip(weights.iter_mut()).enumerate() {
            let (bx, by, bz) = (k & 1, (k >> 1) & 1, (k >> 2) & 1);
            *v = self.vertex_index(cell[0] + bx, cell[1] + by, cell[2] + bz);
            *w = wx[bx] * wy[by] * wz[bz];
        }
        let c = self.cell_size();
        Stencil {
            verts,
            weights,
            wx,
            wy,
            wz,
            inv_cell: Vec3::new(one / c.x, one / c.y, one / c.z),
        }
    }

    /// Raw trilinear blend of one channel.
    ///
    /// Outside the bounding box this returns the empty-space sentinel:
    /// negative infinity for the density channel (so the density nonlinearity
    /// yields exactly zero) and zero for every other channel.
    pub fn trilinear(&self, p: Vec3<T>, channel: usize) -> T {
        match self.stencil(p) {
            Some(st) => st.gather(self.channel(channel)),
            None if channel == CH_DENSITY => T::neg_infinity(),
            None => T::zero(),
        }
    }

    /// Deformation query: interpolates raw control offsets and the rigidity
    /// logit, applies the sigmoid, canonicalizes, and evaluates the spline.
    pub fn sample_deformation(
        &self,
        x: Vec3<T>,
        time: T,
        mode: CanonicalMode,
    ) -> DeformationSample<T> {
        let mut beta = [Vec3::zero(); MAX_ORDER];
        let eval = self.deform_into(x, time, mode, &mut beta);
        let beta = ControlPolygon::new(beta[..self.order].to_vec())
            .expect("interpolated polygon is valid");
        DeformationSample {
            delta: eval.delta,
            delta0: eval.delta0,
            rigidity: eval.rigidity,
            beta,
        }
    }

    /// Allocation-free deformation query for the render loop.
    pub(crate) fn deform_at(&self, x: Vec3<T>, time: T, mode: CanonicalMode) -> DeformEval<T> {
        let mut beta = [Vec3::zero(); MAX_ORDER];
        self.deform_into(x, time, mode, &mut beta)
    }

    fn deform_into(
        &self,
        x: Vec3<T>,
        time: T,
        mode: CanonicalMode,
        beta: &mut [Vec3<T>; MAX_ORDER],
    ) -> DeformEval<T> {
        let o = self.order;
        let rig_logit = match self.stencil(x) {
            Some(st) => {
                for (p, b) in beta.iter_mut().enumerate().take(o) {
                    *b = Vec3::new(
                        st.gather(self.channel(CH_OFFSETS + 3 * p)),
                        st.gather(self.channel(CH_OFFSETS + 3 * p + 1)),
                        st.gather(self.channel(CH_OFFSETS + 3 * p + 2)),
                    );
                }
                st.gather(self.channel(CH_RIGIDITY))
            }
            None => T::zero(),
        };
        canonicalize_in_place(&mut beta[..o], mode);
        let delta0 = spline::de_casteljau(&beta[..o], time);
        let rigidity = sigmoid(rig_logit);
        DeformEval {
            delta: delta0 * rigidity,
            delta0,
            rigidity,
        }
    }

    /// Radiance query at an already-deformed position.
    ///
    /// Density goes through a softplus, color through a sigmoid, and the
    /// view-dependent rescale is confined to [1/2, 1].
    pub fn sample_radiance(&self, x_deformed: Vec3<T>, view_dir: Vec3<T>) -> (T, Vec3<T>) {
        debug_assert!((view_dir.norm() - T::one()).abs() <= real(1e-5));
        let (draw, rgb_logits, sh) = match self.stencil(x_deformed) {
            Some(st) => (
                st.gather(self.channel(CH_DENSITY)),
                Vec3::new(
                    st.gather(self.channel(CH_RGB)),
                    st.gather(self.channel(CH_RGB + 1)),
                    st.gather(self.channel(CH_RGB + 2)),
                ),
                [
                    st.gather(self.channel(CH_SH)),
                    st.gather(self.channel(CH_SH + 1)),
                    st.gather(self.channel(CH_SH + 2)),
                    st.gather(self.channel(CH_SH + 3)),
                ],
            ),
            None => (T::neg_infinity(), Vec3::zero(), [T::zero(); 4]),
        };
        let sigma = softplus(draw);
        let rgb_pos = Vec3::new(
            sigmoid(rgb_logits.x),
            sigmoid(rgb_logits.y),
            sigmoid(rgb_logits.z),
        );
        let y = sh_basis(view_dir);
        let rescale_logit = sh.iter().zip(y.iter()).map(|(&c, &b)| c * b).sum::<T>();
        let scale = T::one() - sigmoid(rescale_logit) * real(0.5);
        (sigma, rgb_pos * scale)
    }

    /// Adjoint of [`Self::sample_deformation`].
    ///
    /// `d_delta`, `d_delta0`, and `d_rigidity` are the upstream gradients on
    /// the final deformation, the pre-rescale deformation, and the rigidity;
    /// parameter gradients accumulate into `grads` (grid parameter layout).
    pub fn deformation_backward(
        &self,
        x: Vec3<T>,
        time: T,
        mode: CanonicalMode,
        d_delta: Vec3<T>,
        d_delta0: Vec3<T>,
        d_rigidity: T,
        grads: &mut [T],
    ) {
        debug_assert_eq!(grads.len(), self.n_params());
        let st = match self.stencil(x) {
            Some(st) => st,
            None => return,
        };
        let o = self.order;
        let eval = self.deform_at(x, time, mode);
        let r = eval.rigidity;

        // delta = r * delta0
        let d_delta0_total = d_delta * r + d_delta0;
        let d_r = d_delta.dot(eval.delta0) + d_rigidity;
        let d_rig_logit = d_r * r * (T::one() - r);
        st.scatter(grads, self.param_index(CH_RIGIDITY, 0), d_rig_logit);

        // De Casteljau is linear in the canonicalized points with Bernstein
        // coefficients; chain through the canonicalization.
        let mut bw = [T::zero(); MAX_ORDER];
        bernstein_weights(o, time, &mut bw);
        for p in 0..o {
            let d_beta = match mode {
                CanonicalMode::None => d_delta0_total * bw[p],
                CanonicalMode::SubtractFirst => {
                    if p == 0 {
                        // beta~_p = beta_p - beta_0 for every p, so beta_0
                        // receives -(sum of the p >= 1 weights).
                        d_delta0_total * -(T::one() - bw[0])
                    } else {
                        d_delta0_total * bw[p]
                    }
                }
                CanonicalMode::PinFirstZero => {
                    if p == 0 {
                        continue;
                    }
                    d_delta0_total * bw[p]
                }
            };
            st.scatter(grads, self.param_index(CH_OFFSETS + 3 * p, 0), d_beta.x);
            st.scatter(grads, self.param_index(CH_OFFSETS + 3 * p + 1, 0), d_beta.y);
            st.scatter(grads, self.param_index(CH_OFFSETS + 3 * p + 2, 0), d_beta.z);
        }
    }

    /// Adjoint of [`Self::sample_radiance`]. Returns the gradient with
    /// respect to the deformed position so callers can chain it into the
    /// deformation.
    pub fn radiance_backward(
        &self,
        x_deformed: Vec3<T>,
        view_dir: Vec3<T>,
        d_sigma: T,
        d_rgb: Vec3<T>,
        grads: &mut [T],
    ) -> Vec3<T> {
        debug_assert_eq!(grads.len(), self.n_params());
        let st = match self.stencil(x_deformed) {
            Some(st) => st,
            None => return Vec3::zero(),
        };
        let half = real::<T>(0.5);
        let one = T::one();

        let draw = st.gather(self.channel(CH_DENSITY));
        let rgb_logits = Vec3::new(
            st.gather(self.channel(CH_RGB)),
            st.gather(self.channel(CH_RGB + 1)),
            st.gather(self.channel(CH_RGB + 2)),
        );
        let sh = [
            st.gather(self.channel(CH_SH)),
            st.gather(self.channel(CH_SH + 1)),
            st.gather(self.channel(CH_SH + 2)),
            st.gather(self.channel(CH_SH + 3)),
        ];
        let y = sh_basis(view_dir);
        let rescale_logit = sh.iter().zip(y.iter()).map(|(&c, &b)| c * b).sum::<T>();
        let s_g = sigmoid(rescale_logit);
        let scale = one - s_g * half;
        let rgb_pos = Vec3::new(
            sigmoid(rgb_logits.x),
            sigmoid(rgb_logits.y),
            sigmoid(rgb_logits.z),
        );

        // rgb = scale * rgb_pos
        let d_scale = d_rgb.dot(rgb_pos);
        let d_rgb_pos = d_rgb * scale;
        let d_rgb_logits = Vec3::new(
            d_rgb_pos.x * rgb_pos.x * (one - rgb_pos.x),
            d_rgb_pos.y * rgb_pos.y * (one - rgb_pos.y),
            d_rgb_pos.z * rgb_pos.z * (one - rgb_pos.z),
        );
        let d_rescale_logit = -d_scale * half * s_g * (one - s_g);
        let d_draw = d_sigma * sigmoid(draw);

        st.scatter(grads, self.param_index(CH_DENSITY, 0), d_draw);
        st.scatter(grads, self.param_index(CH_RGB, 0), d_rgb_logits.x);
        st.scatter(grads, self.param_index(CH_RGB + 1, 0), d_rgb_logits.y);
        st.scatter(grads, self.param_index(CH_RGB + 2, 0), d_rgb_logits.z);
        for (j, &b) in y.iter().enumerate() {
            st.scatter(grads, self.param_index(CH_SH + j, 0), d_rescale_logit * b);
        }

        // Spatial gradient through the trilinear weights.
        let mut d_pos = st.gather_grad(self.channel(CH_DENSITY)) * d_draw;
        d_pos += st.gather_grad(self.channel(CH_RGB)) * d_rgb_logits.x;
        d_pos += st.gather_grad(self.channel(CH_RGB + 1)) * d_rgb_logits.y;
        d_pos += st.gather_grad(self.channel(CH_RGB + 2)) * d_rgb_logits.z;
        for (j, &b) in y.iter().enumerate() {
            d_pos += st.gather_grad(self.channel(CH_SH + j)) * (d_rescale_logit * b);
        }
        d_pos
    }

    /// Writes the checkpoint: magic, version, order, resolution, bounding
    /// box, then each channel as a contiguous little-endian f32 array in
    /// x-fastest vertex order.
    pub fn save(&self, path: &Path) -> Result<()> {
        let mut w = BufWriter::new(File::create(path)?);
        self.write(&mut w)?;
        w.flush()?;
        Ok(())
    }

    pub fn write(&self, w: &mut impl Write) -> Result<()> {
        w.write_all(CHECKPOINT_MAGIC)?;
        w.write_all(&CHECKPOINT_VERSION.to_le_bytes())?;
        w.write_all(&(self.order as u32).to_le_bytes())?;
        for r in self.res {
            w.write_all(&(r as u32).to_le_bytes())?;
        }
        for v in [self.aabb.min, self.aabb.max] {
            for c in v.to_f64() {
                w.write_all(&c.to_le_bytes())?;
            }
        }
        for &p in &self.params {
            w.write_all(&(p.to_f64().unwrap() as f32).to_le_bytes())?;
        }
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let mut r = BufReader::new(File::open(path)?);
        Self::read(&mut r)
    }

    pub fn read(r: &mut impl Read) -> Result<Self> {
        let mut magic = [0u8; 4];
        r.read_exact(&mut magic)?;
        if &magic != CHECKPOINT_MAGIC {
            return Err(Error::Checkpoint(format!(
                "bad magic {magic:?}, expected {CHECKPOINT_MAGIC:?}"
            )));
        }
        let version = read_u32(r)?;
        if version != CHECKPOINT_VERSION {
            return Err(Error::Checkpoint(format!(
                "unsupported format version {version}"
            )));
        }
        let order = read_u32(r)? as usize;
        let res = [
            read_u32(r)? as usize,
            read_u32(r)? as usize,
            read_u32(r)? as usize,
        ];
        let mut corners = [0.0f64; 6];
        for c in corners.iter_mut() {
            let mut b = [0u8; 8];
            r.read_exact(&mut b)?;
            *c = f64::from_le_bytes(b);
        }
        let aabb = Aabb::new(
            Vec3::from_f64([corners[0], corners[1], corners[2]]),
            Vec3::from_f64([corners[3], corners[4], corners[5]]),
        );
        let mut grid = Self::init(res, aabb, order, 0)?;
        for p in grid.params.iter_mut() {
            let mut b = [0u8; 4];
            r.read_exact(&mut b)?;
            *p = real(f32::from_le_bytes(b) as f64);
        }
        // Trailing data means the file does not match the header.
        let mut extra = [0u8; 1];
        if r.read(&mut extra)? != 0 {
            return Err(Error::Checkpoint("trailing bytes after parameters".into()));
        }
        Ok(grid)
    }
}

fn read_u32(r: &mut impl Read) -> Result<u32> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b)?;
    Ok(u32::from_le_bytes(b))
}

/// Gradient accumulator laid out exactly like the grid parameters.
#[derive(Clone, Debug)]
pub struct GradBuffer<T> {
    pub data: Vec<T>,
}

impl<T: Real> GradBuffer<T> {
    pub fn zeros(grid: &VoxelGrid<T>) -> Self {
        Self {
            data: vec![T::zero(); grid.n_params()],
        }
    }

    pub fn add_from(&mut self, other: &[T]) {
        debug_assert_eq!(self.data.len(), other.len());
        for (a, &b) in self.data.iter_mut().zip(other) {
            *a += b;
        }
    }

    pub fn add_scaled(&mut self, other: &[T], s: T) {
        debug_assert_eq!(self.data.len(), other.len());
        for (a, &b) in self.data.iter_mut().zip(other) {
            *a += b * s;
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn test_grid(order: usize) -> VoxelGrid<f64> {
        VoxelGrid::init([4, 4, 4], Aabb::cube(1.0), order, 0).unwrap()
    }

    fn randomize(grid: &mut VoxelGrid<f64>, rng: &mut ChaCha8Rng, offset_scale: f64) {
        let n = grid.n_verts();
        let nc = grid.n_channels();
        for c in 0..nc {
            for v in 0..n {
                let scale = if c >= CH_OFFSETS { offset_scale } else { 1.0 };
                grid.params_mut()[c * n + v] = rng.gen_range(-1.0..1.0) * scale;
            }
        }
    }

    #[test]
    fn rejects_bad_construction() {
        assert!(VoxelGrid::<f64>::init([1, 4, 4], Aabb::cube(1.0), 4, 0).is_err());
        assert!(VoxelGrid::<f64>::init([4, 4, 4], Aabb::cube(1.0), 1, 0).is_err());
        assert!(VoxelGrid::<f64>::init([4, 4, 4], Aabb::cube(-1.0), 4, 0).is_err());
    }

    #[test]
    fn vertex_hit_returns_stored_value() {
        let mut g = test_grid(3);
        let v = g.vertex_index(2, 1, 3);
        g.channel_mut(CH_DENSITY)[v] = 7.5;
        // vertex (2,1,3) of a 4^3 grid on [-1,1]^3
        let p = Vec3::new(0.0, -0.5, 0.5);
        assert!((g.trilinear(p, CH_DENSITY) - 7.5).abs() < 1e-12);
    }

    #[test]
    fn cell_center_is_mean_of_corners() {
        let mut g = test_grid(3);
        let mut sum = 0.0;
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for k in 0..8 {
            let v = g.vertex_index(1 + (k & 1), 2 + ((k >> 1) & 1), (k >> 2) & 1);
            let val = rng.gen_range(-3.0..3.0);
            g.channel_mut(CH_DENSITY)[v] = val;
            sum += val;
        }
        // center of cell (1,2,0): min + (cell + 0.5) * cell_size
        let p = Vec3::new(-1.0 + 1.5 * 0.5, -1.0 + 2.5 * 0.5, -1.0 + 0.5 * 0.5);
        assert!((g.trilinear(p, CH_DENSITY) - sum / 8.0).abs() < 1e-12);
    }

    #[test]
    fn out_of_bounds_reads_as_empty_space() {
        let g = test_grid(3);
        let p = Vec3::new(5.0, 0.0, 0.0);
        assert_eq!(g.trilinear(p, CH_DENSITY), f64::NEG_INFINITY);
        assert_eq!(g.trilinear(p, CH_RIGIDITY), 0.0);
        let (sigma, _) = g.sample_radiance(p, Vec3::new(0.0, 0.0, 1.0));
        assert_eq!(sigma, 0.0);
        let d = g.sample_deformation(p, 0.5, CanonicalMode::None);
        assert_eq!(d.delta, Vec3::zero());
    }

    #[test]
    fn init_grid_has_no_motion_and_near_identity_rescale() {
        let g = test_grid(5);
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        for _ in 0..20 {
            let x = Vec3::new(
                rng.gen_range(-1.0..1.0),
                rng.gen_range(-1.0..1.0),
                rng.gen_range(-1.0..1.0),
            );
            let t = rng.gen_range(0.0..=1.0);
            let d = g.sample_deformation(x, t, CanonicalMode::None);
            assert_eq!(d.delta, Vec3::zero());

            let dir = Vec3::new(rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0), 0.5)
                .normalized();
            let (_, rgb) = g.sample_radiance(x, dir);
            let expected_scale = 1.0 - sigmoid(-4.0f64) / 2.0;
            assert!((expected_scale - 0.99102).abs() < 5e-6);
            // init rgb logits are 0 -> rgb_pos = 0.5
            assert!((rgb.x - 0.5 * expected_scale).abs() < 1e-12);
        }
    }

    #[test]
    fn radiance_examples() {
        let mut g = test_grid(3);
        g.channel_mut(CH_DENSITY).fill(-20.0);
        g.channel_mut(CH_SH).fill(0.0);
        let dir = Vec3::new(0.0, 0.0, 1.0);
        let (sigma, rgb) = g.sample_radiance(Vec3::zero(), dir);
        assert!(sigma <= 2.1e-9);
        // zero coefficients -> scale exactly 0.75
        assert!((rgb.x / 0.5 - 0.75).abs() < 1e-12);

        // strongly negative rescale logit along the view -> scale -> 1
        let n = g.n_verts();
        g.channel_mut(CH_SH)[..n].fill(-50.0);
        let (_, rgb) = g.sample_radiance(Vec3::zero(), dir);
        assert!((rgb - Vec3::splat(0.5)).max_abs() < 1e-9);
    }

    #[test]
    fn rescale_stays_in_half_to_one() {
        let mut g = test_grid(3);
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        randomize(&mut g, &mut rng, 0.1);
        for c in 0..4 {
            let ch = g.channel_mut(CH_SH + c);
            for v in ch.iter_mut() {
                *v = rng.gen_range(-100.0..100.0);
            }
        }
        for _ in 0..200 {
            let x = Vec3::new(
                rng.gen_range(-1.0..1.0),
                rng.gen_range(-1.0..1.0),
                rng.gen_range(-1.0..1.0),
            );
            let dir = Vec3::new(
                rng.gen_range(-1.0..1.0),
                rng.gen_range(-1.0..1.0),
                rng.gen_range(-1.0..1.0),
            )
            .normalized();
            let (_, rgb) = g.sample_radiance(x, dir);
            // rgb = scale * sigmoid(logits), so scale = rgb / rgb_pos
            let st = g.stencil(x).unwrap();
            let pos = sigmoid(st.gather(g.channel(CH_RGB)));
            let scale = rgb.x / pos;
            assert!((0.5 - 1e-9..=1.0 + 1e-9).contains(&scale), "scale {scale}");
        }
    }

    #[test]
    fn uniform_polygon_grid_matches_spline_eval() {
        let mut g = test_grid(4);
        let beta = [
            Vec3::new(0.1, 0.0, -0.2),
            Vec3::new(0.3, 0.2, 0.1),
            Vec3::new(-0.1, 0.4, 0.0),
            Vec3::new(0.2, -0.3, 0.3),
        ];
        for (p, b) in beta.iter().enumerate() {
            g.channel_mut(CH_OFFSETS + 3 * p).fill(b.x);
            g.channel_mut(CH_OFFSETS + 3 * p + 1).fill(b.y);
            g.channel_mut(CH_OFFSETS + 3 * p + 2).fill(b.z);
        }
        g.channel_mut(CH_RIGIDITY).fill(0.0);
        let poly = ControlPolygon::new(beta.to_vec()).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        for _ in 0..50 {
            let x = Vec3::new(
                rng.gen_range(-0.9..0.9),
                rng.gen_range(-0.9..0.9),
                rng.gen_range(-0.9..0.9),
            );
            let t = rng.gen_range(0.0..=1.0);
            let d = g.sample_deformation(x, t, CanonicalMode::None);
            let expect = poly.de_casteljau(t) * 0.5; // sigmoid(0) = 0.5
            assert!((d.delta - expect).max_abs() < 1e-12);
        }
    }

    #[test]
    fn subtract_first_is_undeformed_at_time_zero() {
        let mut g = test_grid(4);
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        randomize(&mut g, &mut rng, 0.3);
        for _ in 0..30 {
            let x = Vec3::new(
                rng.gen_range(-1.0..1.0),
                rng.gen_range(-1.0..1.0),
                rng.gen_range(-1.0..1.0),
            );
            let d = g.sample_deformation(x, 0.0, CanonicalMode::SubtractFirst);
            assert_eq!(d.delta, Vec3::zero());
        }
    }

    #[test]
    fn zero_rigidity_kills_deformation_exactly() {
        let mut g = test_grid(3);
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        randomize(&mut g, &mut rng, 0.5);
        g.channel_mut(CH_RIGIDITY).fill(-1e4);
        let d = g.sample_deformation(Vec3::new(0.2, -0.3, 0.4), 0.7, CanonicalMode::None);
        assert_eq!(d.rigidity, 0.0);
        assert_eq!(d.delta, Vec3::zero());
    }

    #[test]
    fn deformation_is_continuous_across_cell_boundaries() {
        let mut g = test_grid(3);
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        randomize(&mut g, &mut rng, 0.5);
        // Same world point seen as frac=1 of cell i and frac=0 of cell i+1.
        for _ in 0..50 {
            let cell = [
                rng.gen_range(0..3usize),
                rng.gen_range(0..4usize),
                rng.gen_range(0..4usize),
            ];
            let fy = rng.gen_range(0.0..1.0);
            let fz = rng.gen_range(0.0..1.0);
            let a = g.stencil_at_cell(cell, Vec3::new(1.0, fy, fz));
            let b = g.stencil_at_cell([cell[0] + 1, cell[1], cell[2]], Vec3::new(0.0, fy, fz));
            for c in 0..g.n_channels() {
                let va = a.gather(g.channel(c));
                let vb = b.gather(g.channel(c));
                assert!((va - vb).abs() <= 1e-12, "channel {c}: {va} vs {vb}");
            }
        }
    }

    #[test]
    fn deformation_time_lipschitz_bound() {
        let mut g = test_grid(4);
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        randomize(&mut g, &mut rng, 0.4);
        for _ in 0..30 {
            let x = Vec3::new(
                rng.gen_range(-1.0..1.0),
                rng.gen_range(-1.0..1.0),
                rng.gen_range(-1.0..1.0),
            );
            let s = g.sample_deformation(x, 0.0, CanonicalMode::None);
            // Hodograph convex hull: |B'| <= (O-1) max |beta_{i+1} - beta_i|
            let pts = s.beta.points();
            let mut max_diff = 0.0f64;
            for w in pts.windows(2) {
                max_diff = max_diff.max((w[1] - w[0]).norm());
            }
            let lip = (pts.len() - 1) as f64 * max_diff;
            let t1 = rng.gen_range(0.0..=1.0);
            let t2 = rng.gen_range(0.0..=1.0);
            let d1 = g.sample_deformation(x, t1, CanonicalMode::None).delta;
            let d2 = g.sample_deformation(x, t2, CanonicalMode::None).delta;
            assert!((d1 - d2).norm() <= lip * (t1 - t2).abs() + 1e-12);
        }
    }

    #[test]
    fn gradient_scatter_is_local() {
        let mut g = test_grid(3);
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        randomize(&mut g, &mut rng, 0.3);

        // Perturbing vertex (2,2,2) must only change samples in cells
        // [1..3)^3; check a sample inside and one outside that support.
        let vid = g.vertex_index(2, 2, 2);
        let inside = Vec3::new(0.1, 0.05, -0.05);
        let outside = Vec3::new(-0.8, -0.8, -0.8);
        let before_in = g.trilinear(inside, CH_DENSITY);
        let before_out = g.trilinear(outside, CH_DENSITY);
        g.channel_mut(CH_DENSITY)[vid] += 1.0;
        assert!((g.trilinear(inside, CH_DENSITY) - before_in).abs() > 1e-6);
        assert_eq!(g.trilinear(outside, CH_DENSITY), before_out);
    }

    #[test]
    fn deformation_backward_matches_finite_differences() {
        let mut g = test_grid(3);
        let mut rng = ChaCha8Rng::seed_from_u64(10);
        randomize(&mut g, &mut rng, 0.3);
        let x = Vec3::new(0.17, -0.42, 0.33);
        let time = 0.37;
        for mode in [
            CanonicalMode::None,
            CanonicalMode::SubtractFirst,
            CanonicalMode::PinFirstZero,
        ] {
            let d_delta = Vec3::new(0.7, -0.3, 0.2);
            let d_delta0 = Vec3::new(-0.1, 0.4, 0.05);
            let d_rig = 0.6;
            let mut grads = vec![0.0; g.n_params()];
            g.deformation_backward(x, time, mode, d_delta, d_delta0, d_rig, &mut grads);

            let scalar = |g: &VoxelGrid<f64>| {
                let s = g.sample_deformation(x, time, mode);
                s.delta.dot(d_delta) + s.delta0.dot(d_delta0) + s.rigidity * d_rig
            };
            let h = 1e-6;
            for (idx, &an) in grads.iter().enumerate() {
                if an == 0.0 && !rng.gen_bool(0.02) {
                    continue; // spot-check a few zeros, test all nonzeros
                }
                let orig = g.params()[idx];
                g.params_mut()[idx] = orig + h;
                let up = scalar(&g);
                g.params_mut()[idx] = orig - h;
                let dn = scalar(&g);
                g.params_mut()[idx] = orig;
                let fd = (up - dn) / (2.0 * h);
                assert!(
                    (an - fd).abs() <= 1e-6 * fd.abs().max(1.0),
                    "{mode:?} {}: analytic {an} vs fd {fd}",
                    g.describe_param(idx)
                );
            }
        }
    }

    #[test]
    fn radiance_backward_matches_finite_differences() {
        let mut g = test_grid(3);
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        randomize(&mut g, &mut rng, 0.3);
        let x = Vec3::new(-0.23, 0.11, 0.48);
        let dir = Vec3::new(0.3, -0.5, 0.8).normalized();
        let d_sigma = 0.9;
        let d_rgb = Vec3::new(0.2, -0.7, 0.4);

        let mut grads = vec![0.0; g.n_params()];
        let d_pos = g.radiance_backward(x, dir, d_sigma, d_rgb, &mut grads);

        let scalar = |g: &VoxelGrid<f64>, x: Vec3<f64>| {
            let (sigma, rgb) = g.sample_radiance(x, dir);
            sigma * d_sigma + rgb.dot(d_rgb)
        };
        let h = 1e-6;
        for (idx, &an) in grads.iter().enumerate() {
            if an == 0.0 && !rng.gen_bool(0.02) {
                continue;
            }
            let orig = g.params()[idx];
            g.params_mut()[idx] = orig + h;
            let up = scalar(&g, x);
            g.params_mut()[idx] = orig - h;
            let dn = scalar(&g, x);
            g.params_mut()[idx] = orig;
            let fd = (up - dn) / (2.0 * h);
            assert!(
                (an - fd).abs() <= 1e-6 * fd.abs().max(1.0),
                "{}: analytic {an} vs fd {fd}",
                g.describe_param(idx)
            );
        }

        // positional gradient against finite differences of the position
        for a in 0..3 {
            let mut xp = x;
            xp.set_axis(a, x.axis(a) + h);
            let mut xm = x;
            xm.set_axis(a, x.axis(a) - h);
            let fd = (scalar(&g, xp) - scalar(&g, xm)) / (2.0 * h);
            assert!(
                (d_pos.axis(a) - fd).abs() <= 1e-5 * fd.abs().max(1.0),
                "axis {a}: analytic {} vs fd {fd}",
                d_pos.axis(a)
            );
        }
    }

    #[test]
    fn checkpoint_roundtrip_is_bit_identical() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("grid.splf");
        let mut g: VoxelGrid<f32> = VoxelGrid::init([3, 4, 5], Aabb::cube(1.2), 4, 0).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        for p in g.params_mut() {
            *p = rng.gen_range(-2.0f32..2.0);
        }
        g.save(&path).unwrap();
        let h = VoxelGrid::<f32>::load(&path).unwrap();
        assert_eq!(g.resolution(), h.resolution());
        assert_eq!(g.order(), h.order());
        assert_eq!(g.params(), h.params());
        // same on-disk bytes when saved again
        let path2 = dir.path().join("grid2.splf");
        h.save(&path2).unwrap();
        assert_eq!(std::fs::read(&path).unwrap(), std::fs::read(&path2).unwrap());
    }

    #[test]
    fn checkpoint_rejects_garbage() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("bad.splf");
        std::fs::write(&path, b"NOPE").unwrap();
        assert!(VoxelGrid::<f32>::load(&path).is_err());
    }
}
