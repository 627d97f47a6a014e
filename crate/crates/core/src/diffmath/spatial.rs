//! Operations over [`FeatureMap`]s: square convolutions, the 1x1 channel projection,
//! global and windowed pooling, channel concatenation and nearest upsampling.

use std::ops::Range;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{BlockParams, FeatureMap, GradStore, ParamId};

/// Square convolution with zero padding. Weight layout `[out, in, k, k]`.
#[derive(Debug, Clone)]
pub struct Conv2d {
    pub weight: ParamId,
    pub bias: ParamId,
    pub in_channels: usize,
    pub out_channels: usize,
    pub kernel: usize,
    pub stride: usize,
    pub padding: usize,
}

impl Conv2d {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        params: &mut BlockParams,
        name: &str,
        in_channels: usize,
        out_channels: usize,
        kernel: usize,
        stride: usize,
        padding: usize,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        if kernel == 0 || stride == 0 {
            return Err(Error::invalid("conv2d", "kernel and stride must be positive"));
        }
        let kk = kernel * kernel;
        let weight = params.insert_glorot(
            format!("{name}.weight"),
            &[out_channels, in_channels, kernel, kernel],
            in_channels * kk,
            out_channels * kk,
            rng,
        )?;
        let bias = params.insert_zeros(format!("{name}.bias"), &[out_channels])?;
        Ok(Self {
            weight,
            bias,
            in_channels,
            out_channels,
            kernel,
            stride,
            padding,
        })
    }

    pub fn output_dims(&self, height: usize, width: usize) -> Result<(usize, usize)> {
        let (k, s, p) = (self.kernel, self.stride, self.padding);
        if height + 2 * p < k || width + 2 * p < k {
            return Err(Error::shape(
                "conv2d",
                format!("{height}x{width} input smaller than {k}x{k} kernel"),
            ));
        }
        Ok(((height + 2 * p - k) / s + 1, (width + 2 * p - k) / s + 1))
    }

    fn check_input(&self, params: &BlockParams, x: &FeatureMap) -> Result<()> {
        if x.channels != self.in_channels {
            return Err(Error::shape(
                "conv2d",
                format!(
                    "`{}` expects {} input channels, got {}",
                    params.name(self.weight),
                    self.in_channels,
                    x.channels
                ),
            ));
        }
        Ok(())
    }

    /// For every input tap `(ic, ky, kx)`, the input index seen by each output
    /// position, or `None` where the tap lands in the padding.
    fn taps(&self, h: usize, w: usize, oh: usize, ow: usize) -> Vec<Option<usize>> {
        let (k, s, pad) = (self.kernel, self.stride, self.padding as isize);
        let mut out = Vec::with_capacity(self.in_channels * k * k * oh * ow);
        for ic in 0..self.in_channels {
            for ky in 0..k {
                for kx in 0..k {
                    for oy in 0..oh {
                        let iy = (oy * s + ky) as isize - pad;
                        for ox in 0..ow {
                            let ix = (ox * s + kx) as isize - pad;
                            let inside = iy >= 0 && iy < h as isize && ix >= 0 && ix < w as isize;
                            out.push(inside.then(|| (ic * h + iy as usize) * w + ix as usize));
                        }
                    }
                }
            }
        }
        out
    }

    /// Unfold the input into a `(in_channels·k·k) x (oh·ow)` matrix.
    fn unfold(&self, x: &FeatureMap, taps: &[Option<usize>]) -> Vec<f64> {
        taps.iter().map(|t| t.map_or(0.0, |i| x.data[i])).collect()
    }

    pub fn forward(&self, params: &BlockParams, x: &FeatureMap) -> Result<FeatureMap> {
        self.check_input(params, x)?;
        let (oh, ow) = self.output_dims(x.height, x.width)?;
        let cols = self.unfold(x, &self.taps(x.height, x.width, oh, ow));
        let weight = params.value(self.weight);
        let bias = params.value(self.bias);
        let (rows, plane) = (self.in_channels * self.kernel * self.kernel, oh * ow);
        let mut out = FeatureMap::zeros(self.out_channels, oh, ow);
        for oc in 0..self.out_channels {
            let dst = &mut out.data[oc * plane..(oc + 1) * plane];
            dst.iter_mut().for_each(|v| *v = bias[oc]);
            for (r, &wv) in weight[oc * rows..(oc + 1) * rows].iter().enumerate() {
                if wv == 0.0 {
                    continue;
                }
                let src = &cols[r * plane..(r + 1) * plane];
                dst.iter_mut().zip(src).for_each(|(d, v)| *d += wv * v);
            }
        }
        Ok(out)
    }

    /// Accumulates parameter gradients and returns the input gradient.
    pub fn backward(
        &self,
        params: &BlockParams,
        grads: &mut GradStore,
        x: &FeatureMap,
        dy: &FeatureMap,
    ) -> FeatureMap {
        let (oh, ow) = (dy.height, dy.width);
        let taps = self.taps(x.height, x.width, oh, ow);
        let cols = self.unfold(x, &taps);
        let (rows, plane) = (self.in_channels * self.kernel * self.kernel, oh * ow);
        let weight = params.value(self.weight);
        {
            let gb = grads.get_mut(self.bias);
            for oc in 0..self.out_channels {
                gb[oc] += dy.channel(oc).iter().sum::<f64>();
            }
        }
        let mut d_cols = vec![0.0; rows * plane];
        let gw = grads.get_mut(self.weight);
        for oc in 0..self.out_channels {
            let d = &dy.data[oc * plane..(oc + 1) * plane];
            for r in 0..rows {
                let src = &cols[r * plane..(r + 1) * plane];
                gw[oc * rows + r] += d.iter().zip(src).map(|(a, b)| a * b).sum::<f64>();
                let wv = weight[oc * rows + r];
                if wv != 0.0 {
                    d_cols[r * plane..(r + 1) * plane]
                        .iter_mut()
                        .zip(d)
                        .for_each(|(c, g)| *c += wv * g);
                }
            }
        }
        let mut dx = FeatureMap::zeros(x.channels, x.height, x.width);
        for (t, g) in taps.iter().zip(&d_cols) {
            if let Some(i) = t {
                dx.data[*i] += g;
            }
        }
        dx
    }
}

/// Per-pixel linear map across channels (a 1x1 convolution).
#[derive(Debug, Clone)]
pub struct Projection(pub Conv2d);

impl Projection {
    pub fn new(
        params: &mut BlockParams,
        name: &str,
        in_channels: usize,
        out_channels: usize,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        Ok(Self(Conv2d::new(
            params,
            name,
            in_channels,
            out_channels,
            1,
            1,
            0,
            rng,
        )?))
    }

    pub fn forward(&self, params: &BlockParams, x: &FeatureMap) -> Result<FeatureMap> {
        self.0.forward(params, x)
    }

    pub fn backward(
        &self,
        params: &BlockParams,
        grads: &mut GradStore,
        x: &FeatureMap,
        dy: &FeatureMap,
    ) -> FeatureMap {
        self.0.backward(params, grads, x, dy)
    }

    pub fn out_channels(&self) -> usize {
        self.0.out_channels
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PoolMode {
    Avg,
    Max,
}

/// Global pooling of each channel over all spatial positions.
///
/// Max pooling records the first (lowest linear index) argmax per channel.
pub fn spatial_pool(map: &FeatureMap, mode: PoolMode) -> Result<(Vec<f64>, Vec<usize>)> {
    if map.channels == 0 || map.plane() == 0 || map.data.is_empty() {
        return Err(Error::Empty("spatial_pool"));
    }
    let n = map.plane() as f64;
    let mut out = Vec::with_capacity(map.channels);
    let mut argmax = Vec::new();
    for c in 0..map.channels {
        let ch = map.channel(c);
        match mode {
            PoolMode::Avg => out.push(ch.iter().sum::<f64>() / n),
            PoolMode::Max => {
                let mut best = 0;
                for (i, &v) in ch.iter().enumerate() {
                    if v > ch[best] {
                        best = i;
                    }
                }
                out.push(ch[best]);
                argmax.push(best);
            }
        }
    }
    Ok((out, argmax))
}

/// Gradient of [`spatial_pool`] with respect to the map.
pub fn spatial_pool_backward(
    dims: (usize, usize, usize),
    mode: PoolMode,
    argmax: &[usize],
    dy: &[f64],
) -> FeatureMap {
    let (c, h, w) = dims;
    let plane = h * w;
    let mut dx = FeatureMap::zeros(c, h, w);
    for ch in 0..c {
        let dst = &mut dx.data[ch * plane..(ch + 1) * plane];
        match mode {
            PoolMode::Avg => {
                let g = dy[ch] / plane as f64;
                dst.iter_mut().for_each(|v| *v = g);
            }
            PoolMode::Max => dst[argmax[ch]] = dy[ch],
        }
    }
    dx
}

/// Non-overlapping `size x size` pooling with stride `size`.
///
/// With `Avg` this doubles as area-interpolated downsampling by an integer factor.
pub fn window_pool(map: &FeatureMap, size: usize, mode: PoolMode) -> Result<(FeatureMap, Vec<usize>)> {
    if size == 0 || !map.height.is_multiple_of(size) || !map.width.is_multiple_of(size) {
        return Err(Error::shape(
            "window_pool",
            format!("{}x{} not divisible by window {size}", map.height, map.width),
        ));
    }
    let (oh, ow) = (map.height / size, map.width / size);
    let mut out = FeatureMap::zeros(map.channels, oh, ow);
    let mut argmax = Vec::new();
    let area = (size * size) as f64;
    for c in 0..map.channels {
        for oy in 0..oh {
            for ox in 0..ow {
                let mut acc = 0.0;
                let mut best_idx = usize::MAX;
                let mut best = f64::NEG_INFINITY;
                for dy in 0..size {
                    for dx in 0..size {
                        let (y, x) = (oy * size + dy, ox * size + dx);
                        let idx = (c * map.height + y) * map.width + x;
                        let v = map.data[idx];
                        acc += v;
                        if v > best || best_idx == usize::MAX {
                            best = v;
                            best_idx = idx;
                        }
                    }
                }
                let o = (c * oh + oy) * ow + ox;
                out.data[o] = match mode {
                    PoolMode::Avg => acc / area,
                    PoolMode::Max => {
                        argmax.push(best_idx);
                        best
                    }
                };
            }
        }
    }
    Ok((out, argmax))
}

pub fn window_pool_backward(
    input_dims: (usize, usize, usize),
    size: usize,
    mode: PoolMode,
    argmax: &[usize],
    dy: &FeatureMap,
) -> FeatureMap {
    let (c, h, w) = input_dims;
    let mut dx = FeatureMap::zeros(c, h, w);
    match mode {
        PoolMode::Max => {
            for (o, &idx) in argmax.iter().enumerate() {
                dx.data[idx] += dy.data[o];
            }
        }
        PoolMode::Avg => {
            let area = (size * size) as f64;
            for ch in 0..c {
                for y in 0..h {
                    for x in 0..w {
                        dx.data[(ch * h + y) * w + x] = dy.at(ch, y / size, x / size) / area;
                    }
                }
            }
        }
    }
    dx
}

/// Smallest gap between the largest and second-largest value over all
/// max-pool windows of side `size` (`None` pools each whole channel).
pub(crate) fn max_pool_gap(map: &FeatureMap, size: Option<usize>) -> f64 {
    let (wy, wx) = size.map_or((map.height, map.width), |s| (s, s));
    let mut gap = f64::INFINITY;
    for c in 0..map.channels {
        let plane = map.channel(c);
        for by in (0..map.height).step_by(wy) {
            for bx in (0..map.width).step_by(wx) {
                let (mut top, mut second) = (f64::NEG_INFINITY, f64::NEG_INFINITY);
                for y in by..(by + wy).min(map.height) {
                    for x in bx..(bx + wx).min(map.width) {
                        let v = plane[y * map.width + x];
                        if v > top {
                            second = top;
                            top = v;
                        } else if v > second && v < top {
                            second = v;
                        }
                    }
                }
                if second.is_finite() {
                    gap = gap.min(top - second);
                }
            }
        }
    }
    gap
}

/// Nearest-neighbour upsampling by an integer factor.
pub fn upsample_nearest(map: &FeatureMap, factor: usize) -> FeatureMap {
    FeatureMap::from_fn(map.channels, map.height * factor, map.width * factor, |c, y, x| {
        map.at(c, y / factor, x / factor)
    })
}

pub fn upsample_nearest_backward(dy: &FeatureMap, factor: usize) -> FeatureMap {
    let (h, w) = (dy.height / factor, dy.width / factor);
    let mut dx = FeatureMap::zeros(dy.channels, h, w);
    for c in 0..dy.channels {
        for y in 0..dy.height {
            for x in 0..dy.width {
                dx.data[(c * h + y / factor) * w + x / factor] += dy.at(c, y, x);
            }
        }
    }
    dx
}

/// Stack maps along the channel axis; returns the channel range of each input.
pub fn concat_channels(maps: &[&FeatureMap]) -> Result<(FeatureMap, Vec<Range<usize>>)> {
    let first = maps.first().ok_or(Error::Empty("concat_channels"))?;
    let (h, w) = (first.height, first.width);
    let mut data = Vec::new();
    let mut offsets = Vec::with_capacity(maps.len());
    let mut start = 0;
    for m in maps {
        if m.height != h || m.width != w {
            return Err(Error::shape(
                "concat_channels",
                format!("spatial dims {}x{} differ from {h}x{w}", m.height, m.width),
            ));
        }
        data.extend_from_slice(&m.data);
        offsets.push(start..start + m.channels);
        start += m.channels;
    }
    Ok((
        FeatureMap {
            channels: start,
            height: h,
            width: w,
            data,
        },
        offsets,
    ))
}

/// Copy out the channels in `range`.
pub fn slice_channels(map: &FeatureMap, range: Range<usize>) -> Result<FeatureMap> {
    if range.end > map.channels || range.is_empty() {
        return Err(Error::shape(
            "slice_channels",
            format!("range {range:?} outside {} channels", map.channels),
        ));
    }
    let p = map.plane();
    Ok(FeatureMap {
        channels: range.len(),
        height: map.height,
        width: map.width,
        data: map.data[range.start * p..range.end * p].to_vec(),
    })
}
