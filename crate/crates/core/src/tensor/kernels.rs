//! Raw forward/backward kernels for the selective scan and the causal
//! depthwise convolution. The [`graph`](super::graph) ops wrap these; they
//! work on flat row-major slices so the hot loops stay allocation-free.

/// Dimensions of one selective-scan invocation.
#[derive(Clone, Copy, Debug)]
pub struct ScanDims {
    /// Sequence length L.
    pub len: usize,
    /// Input channels D.
    pub channels: usize,
    /// State size S.
    pub state: usize,
}

/// Selective-scan forward pass.
///
/// Per channel d, with h_0 = 0:
///   abar_{t,d,s} = exp(delta_{t,d} * a_{d,s})
///   h_{t,d,s}    = abar_{t,d,s} * h_{t-1,d,s} + delta_{t,d} * b_{t,s} * u_{t,d}
///   y_{t,d}      = sum_s c_{t,s} * h_{t,d,s} + skip_d * u_{t,d}
///
/// `h` and `abar` are caller-allocated `len*channels*state` caches kept for
/// the backward pass. `y` is `len*channels`.
#[allow(clippy::too_many_arguments)]
pub fn scan_forward(
    dims: ScanDims,
    u: &[f64],
    delta: &[f64],
    a: &[f64],
    b: &[f64],
    c: &[f64],
    skip: &[f64],
    y: &mut [f64],
    h: &mut [f64],
    abar: &mut [f64],
) {
    let ScanDims {
        len,
        channels,
        state,
    } = dims;
    for t in 0..len {
        let b_row = &b[t * state..(t + 1) * state];
        let c_row = &c[t * state..(t + 1) * state];
        for d in 0..channels {
            let dt = delta[t * channels + d];
            let ut = u[t * channels + d];
            let base = (t * channels + d) * state;
            let a_row = &a[d * state..(d + 1) * state];
            let mut acc = 0.0;
            if t == 0 {
                for s in 0..state {
                    let ab = (dt * a_row[s]).exp();
                    abar[base + s] = ab;
                    let hv = dt * b_row[s] * ut;
                    h[base + s] = hv;
                    acc += c_row[s] * hv;
                }
            } else {
                let prev = base - channels * state;
                for s in 0..state {
                    let ab = (dt * a_row[s]).exp();
                    abar[base + s] = ab;
                    let hv = ab * h[prev + s] + dt * b_row[s] * ut;
                    h[base + s] = hv;
                    acc += c_row[s] * hv;
                }
            }
            y[t * channels + d] = acc + skip[d] * ut;
        }
    }
}

/// Selective-scan backward pass; accumulates into the `d*` buffers.
///
/// `h` and `abar` are the forward caches. `scratch` is a caller-allocated
/// `channels*state` buffer holding the running state gradient.
#[allow(clippy::too_many_arguments)]
pub fn scan_backward(
    dims: ScanDims,
    u: &[f64],
    delta: &[f64],
    a: &[f64],
    b: &[f64],
    c: &[f64],
    skip: &[f64],
    h: &[f64],
    abar: &[f64],
    dy: &[f64],
    du: &mut [f64],
    ddelta: &mut [f64],
    da: &mut [f64],
    db: &mut [f64],
    dc: &mut [f64],
    dskip: &mut [f64],
    scratch: &mut [f64],
) {
    let ScanDims {
        len,
        channels,
        state,
    } = dims;
    scratch.fill(0.0);
    for t in (0..len).rev() {
        let b_row = &b[t * state..(t + 1) * state];
        let c_row = &c[t * state..(t + 1) * state];
        let db_row = &mut db[t * state..(t + 1) * state];
        // dc needs a sum over channels, accumulated inside the d loop.
        for d in 0..channels {
            let dt = delta[t * channels + d];
            let ut = u[t * channels + d];
            let dyv = dy[t * channels + d];
            let base = (t * channels + d) * state;
            let a_row = &a[d * state..(d + 1) * state];
            let da_row = &mut da[d * state..(d + 1) * state];
            let g_row = &mut scratch[d * state..(d + 1) * state];

            dskip[d] += dyv * ut;
            let mut du_acc = dyv * skip[d];
            let mut ddelta_acc = 0.0;
            for s in 0..state {
                // Total gradient flowing into h_{t,d,s}: direct from y_t plus
                // the carried term abar_{t+1} * g_{t+1} stored in g_row.
                let gh = dyv * c_row[s] + g_row[s];
                dc[t * state + s] += dyv * h[base + s];
                let ab = abar[base + s];
                let hprev = if t == 0 {
                    0.0
                } else {
                    h[base - channels * state + s]
                };
                let dab = gh * hprev;
                ddelta_acc += dab * a_row[s] * ab + gh * b_row[s] * ut;
                da_row[s] += dab * dt * ab;
                db_row[s] += gh * dt * ut;
                du_acc += gh * dt * b_row[s];
                g_row[s] = gh * ab;
            }
            du[t * channels + d] += du_acc;
            ddelta[t * channels + d] += ddelta_acc;
        }
    }
}

/// Causal depthwise convolution forward: y_{t,d} = sum_j w_{d,j} * x_{t-j,d},
/// reading x as zero before the first position. `x`, `y` are `len*channels`;
/// `w` is `channels*kernel` with tap 0 at the current position.
pub fn conv_forward(
    len: usize,
    channels: usize,
    kernel: usize,
    x: &[f64],
    w: &[f64],
    y: &mut [f64],
) {
    for t in 0..len {
        let reach = kernel.min(t + 1);
        for d in 0..channels {
            let mut acc = 0.0;
            for j in 0..reach {
                acc += w[d * kernel + j] * x[(t - j) * channels + d];
            }
            y[t * channels + d] = acc;
        }
    }
}

/// Causal depthwise convolution backward; accumulates into `dx` and `dw`.
#[allow(clippy::too_many_arguments)]
pub fn conv_backward(
    len: usize,
    channels: usize,
    kernel: usize,
    x: &[f64],
    w: &[f64],
    dy: &[f64],
    dx: &mut [f64],
    dw: &mut [f64],
) {
    for t in 0..len {
        let reach = kernel.min(t + 1);
        for d in 0..channels {
            let g = dy[t * channels + d];
            for j in 0..reach {
                dx[(t - j) * channels + d] += w[d * kernel + j] * g;
                dw[d * kernel + j] += x[(t - j) * channels + d] * g;
            }
        }
    }
}
