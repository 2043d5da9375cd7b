"""Recurrent convolutional autoencoder over 20-step block sequences.

Encoder: four stride-2 conv layers (ReLU + layer norm) squeeze each frame to
a small feature map, then two stacked ConvLSTM layers model the temporal
evolution; the cell state of the first feeds the second, and the per-step
latent code is the concatenation of the two hidden states. The decoder
mirrors this: two ConvLSTM layers read the latent sequence, their hidden
states are concatenated and pushed through four stride-2 transposed conv
layers, a nearest-neighbour resize back to the input size, and a final
linear convolution to one channel.

All gate kernels follow the peephole ConvLSTM update

    z_t = tanh(a_t * W_az + h_{t-1} * W_hz + b_z)
    i_t = sigma(a_t * W_ai + h_{t-1} * W_hi + W_ci (x) c_{t-1} + b_i)
    f_t = sigma(a_t * W_af + h_{t-1} * W_hf + W_cf (x) c_{t-1} + b_f)
    o_t = sigma(a_t * W_ao + h_{t-1} * W_ho + W_co (x) c_t + b_o)
    c_t = z_t (x) i_t + c_{t-1} (x) f_t
    h_t = tanh(c_t) (x) o_t

with * a same-padding convolution and (x) the elementwise product.

Gradients are hand-derived per layer (no autodiff graph); training minimizes
mean squared reconstruction error with ADAM, in two phases: the conv/deconv
stacks are pretrained as a per-frame autoencoder first, then the full
recurrent model is trained end to end with the pretrained weights loaded
back in.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import ShapeError, TrainingDivergedError
from .tensorops import (
    LAYER_NORM_EPS,
    AdamState,
    ConvKernel,
    _layer_norm_bwd,
    _layer_norm_fwd,
    adam_step,
    conv2d,
    conv2d_grad,
    relu,
    relu_grad,
    resize_nearest,
    resize_nearest_grad,
    transposed_conv2d,
    transposed_conv2d_grad,
)

N_CONV_LAYERS = 4
DROPOUT_P = 0.65  # drop probability on cell states fed to the next layer

_GATES = ("z", "i", "f", "o")


def _ceil_div(a: int, b: int) -> int:
    return -(-a // b)


@dataclass(frozen=True)
class RcaeArch:
    """Architecture metadata; `conv_filters` must equal 2*lstm_filters so the
    pretrained conv autoencoder's deconv stack accepts the concatenated
    decoder hidden states unchanged."""

    block_size: int = 90
    conv_filters: int = 128
    lstm_filters: int = 64
    kernel_size: int = 3

    def __post_init__(self) -> None:
        if self.conv_filters != 2 * self.lstm_filters:
            raise ValueError("conv_filters must equal 2 * lstm_filters")

    @property
    def latent_hw(self) -> int:
        s = self.block_size
        for _ in range(N_CONV_LAYERS):
            s = _ceil_div(s, 2)
        return s

    @property
    def pre_resize_hw(self) -> int:
        return self.latent_hw * 2**N_CONV_LAYERS

    @property
    def latent_channels(self) -> int:
        return 2 * self.lstm_filters

    @property
    def latent_dim(self) -> int:
        return self.latent_hw * self.latent_hw * self.latent_channels


@dataclass
class ConvLstmCell:
    """Parameters of one peephole ConvLSTM layer. Peephole weights act
    elementwise and share the state's (h, w, c) shape."""

    waz: np.ndarray
    whz: np.ndarray
    wai: np.ndarray
    whi: np.ndarray
    waf: np.ndarray
    whf: np.ndarray
    wao: np.ndarray
    who: np.ndarray
    wci: np.ndarray
    wcf: np.ndarray
    wco: np.ndarray
    bz: np.ndarray
    bi: np.ndarray
    bf: np.ndarray
    bo: np.ndarray

    @property
    def units(self) -> int:
        return self.waz.shape[3]


_CELL_FIELDS = ("waz", "whz", "wai", "whi", "waf", "whf", "wao", "who",
                "wci", "wcf", "wco", "bz", "bi", "bf", "bo")


def _cell_param_specs(prefix: str, cin: int, units: int, hw: int, k: int):
    specs = []
    for g in _GATES:
        specs.append((f"{prefix}_wa{g}", (k, k, cin, units), "conv"))
        specs.append((f"{prefix}_wh{g}", (k, k, units, units), "conv"))
    for g in ("i", "f", "o"):
        specs.append((f"{prefix}_wc{g}", (hw, hw, units), "zero"))
    for g in _GATES:
        specs.append((f"{prefix}_b{g}", (units,), "forget_bias" if g == "f" else "zero"))
    return specs


def param_specs(arch: RcaeArch):
    """Declared parameter order: (name, shape, init kind). Persistence and
    initialization both follow this list."""
    k = arch.kernel_size
    f = arch.conv_filters
    u = arch.lstm_filters
    hw = arch.latent_hw
    specs = []
    cin = 1
    for i in range(1, N_CONV_LAYERS + 1):
        specs.append((f"enc_conv{i}_w", (k, k, cin, f), "conv"))
        specs.append((f"enc_conv{i}_b", (f,), "zero"))
        specs.append((f"enc_ln{i}_g", (f,), "one"))
        specs.append((f"enc_ln{i}_b", (f,), "zero"))
        cin = f
    specs += _cell_param_specs("enc_lstm1", f, u, hw, k)
    specs += _cell_param_specs("enc_lstm2", u, u, hw, k)
    specs += _cell_param_specs("dec_lstm3", 2 * u, u, hw, k)
    specs += _cell_param_specs("dec_lstm4", u, u, hw, k)
    cin = 2 * u
    for i in range(1, N_CONV_LAYERS + 1):
        specs.append((f"dec_deconv{i}_w", (k, k, cin, f), "conv"))
        specs.append((f"dec_deconv{i}_b", (f,), "zero"))
        specs.append((f"dec_ln{i}_g", (f,), "one"))
        specs.append((f"dec_ln{i}_b", (f,), "zero"))
        cin = f
    specs.append(("final_conv_w", (k, k, f, 1), "conv"))
    specs.append(("final_conv_b", (1,), "zero"))
    return specs


@dataclass
class RcaeModel:
    """Autoencoder parameters plus architecture metadata."""

    arch: RcaeArch
    params: dict[str, np.ndarray]
    loss_trace: dict[str, list[float]] = field(default_factory=dict)

    def cell(self, prefix: str) -> ConvLstmCell:
        return ConvLstmCell(**{f: self.params[f"{prefix}_{f}"] for f in _CELL_FIELDS})

    @property
    def dtype(self):
        return self.params["enc_conv1_w"].dtype


def init_rcae(arch: RcaeArch, seed: int = 0, dtype=np.float32) -> RcaeModel:
    """Fan-in-scaled uniform weight init from a seeded PRNG; layer-norm gains
    start at one, the forget-gate bias at one, everything else at zero."""
    rng = np.random.default_rng(np.random.SeedSequence(entropy=seed, spawn_key=(101,)))
    params: dict[str, np.ndarray] = {}
    for name, shape, kind in param_specs(arch):
        if kind == "conv":
            fan_in = int(np.prod(shape[:3]))
            lim = 1.0 / np.sqrt(fan_in)
            params[name] = rng.uniform(-lim, lim, size=shape).astype(dtype)
        elif kind == "one":
            params[name] = np.ones(shape, dtype=dtype)
        elif kind == "forget_bias":
            params[name] = np.ones(shape, dtype=dtype)
        else:
            params[name] = np.zeros(shape, dtype=dtype)
    return RcaeModel(arch=arch, params=params)


# ---------------------------------------------------------------------------
# ConvLSTM forward/backward
# ---------------------------------------------------------------------------


def _sigmoid(x: np.ndarray) -> np.ndarray:
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def _fused_input_kernel(cell: ConvLstmCell) -> ConvKernel:
    w = np.concatenate([cell.waz, cell.wai, cell.waf, cell.wao], axis=3)
    b = np.concatenate([cell.bz, cell.bi, cell.bf, cell.bo])
    return ConvKernel(w, b)


def _fused_hidden_kernel(cell: ConvLstmCell) -> ConvKernel:
    w = np.concatenate([cell.whz, cell.whi, cell.whf, cell.who], axis=3)
    return ConvKernel(w, np.zeros(w.shape[3], dtype=w.dtype))


def convlstm_step(
    a_t: np.ndarray, h_prev: np.ndarray, c_prev: np.ndarray, cell: ConvLstmCell
) -> tuple[np.ndarray, np.ndarray]:
    """One ConvLSTM update; axis 0 of every tensor is an independent batch."""
    h, c, _ = _convlstm_step_fwd(a_t, h_prev, c_prev, cell)
    return h, c


def _convlstm_step_fwd(a_t, h_prev, c_prev, cell: ConvLstmCell):
    u = cell.units
    if h_prev.shape != c_prev.shape or h_prev.shape[3] != u:
        raise ShapeError(f"state shapes {h_prev.shape}/{c_prev.shape} do not match {u} units")
    pre = conv2d(a_t, _fused_input_kernel(cell), stride=1, padding="same")
    pre += conv2d(h_prev, _fused_hidden_kernel(cell), stride=1, padding="same")
    pz, pi, pf, po = np.split(pre, 4, axis=3)
    z = np.tanh(pz)
    i = _sigmoid(pi + cell.wci * c_prev)
    f = _sigmoid(pf + cell.wcf * c_prev)
    c = z * i + c_prev * f
    o = _sigmoid(po + cell.wco * c)
    h = np.tanh(c) * o
    return h, c, (z, i, f, o, c)


def _lstm_forward(cell: ConvLstmCell, a_seq: np.ndarray, want_cache: bool):
    """Run a ConvLSTM layer over a_seq (B, T, h, w, cin) from zero states.

    The input-to-gate convolutions are batched over all time steps; only the
    state-to-gate convolutions run inside the recurrence.
    """
    b, t, hh, ww, _ = a_seq.shape
    u = cell.units
    dtype = a_seq.dtype
    a_flat = a_seq.reshape(b * t, hh, ww, -1)
    pre_a = conv2d(a_flat, _fused_input_kernel(cell), 1, "same").reshape(b, t, hh, ww, 4 * u)
    wh = _fused_hidden_kernel(cell)
    h = np.zeros((b, hh, ww, u), dtype=dtype)
    c = np.zeros((b, hh, ww, u), dtype=dtype)
    h_seq = np.empty((b, t, hh, ww, u), dtype=dtype)
    c_seq = np.empty((b, t, hh, ww, u), dtype=dtype)
    gates = np.empty((b, t, hh, ww, 4 * u), dtype=dtype) if want_cache else None
    for step in range(t):
        pre = pre_a[:, step] + conv2d(h, wh, 1, "same")
        pz, pi, pf, po = np.split(pre, 4, axis=3)
        z = np.tanh(pz)
        i = _sigmoid(pi + cell.wci * c)
        f = _sigmoid(pf + cell.wcf * c)
        c = z * i + c * f
        o = _sigmoid(po + cell.wco * c)
        h = np.tanh(c) * o
        h_seq[:, step] = h
        c_seq[:, step] = c
        if want_cache:
            gates[:, step] = np.concatenate([z, i, f, o], axis=3)
    cache = (a_seq, h_seq, c_seq, gates) if want_cache else None
    return h_seq, c_seq, cache


def _lstm_backward(cell: ConvLstmCell, cache, dh_seq, dc_seq, prefix: str, grads: dict):
    """BPTT through one layer. dh_seq/dc_seq carry the externally injected
    per-step gradients on hidden and cell states; returns da_seq."""
    a_seq, h_seq, c_seq, gate_seq = cache
    b, t, hh, ww, _ = a_seq.shape
    u = cell.units
    dtype = a_seq.dtype
    wh = _fused_hidden_kernel(cell)
    dh_carry = np.zeros((b, hh, ww, u), dtype=dtype)
    dc_carry = np.zeros_like(dh_carry)
    dpre_a = np.empty((b, t, hh, ww, 4 * u), dtype=dtype)
    dwh = np.zeros_like(wh.weights)
    dwci = np.zeros_like(cell.wci)
    dwcf = np.zeros_like(cell.wcf)
    dwco = np.zeros_like(cell.wco)
    zero = np.zeros((b, hh, ww, u), dtype=dtype)
    for step in range(t - 1, -1, -1):
        z, i, f, o = np.split(gate_seq[:, step], 4, axis=3)
        c = c_seq[:, step]
        c_prev = c_seq[:, step - 1] if step > 0 else zero
        h_prev = h_seq[:, step - 1] if step > 0 else zero
        dh = dh_seq[:, step] + dh_carry
        dc_ext = dc_seq[:, step] + dc_carry if dc_seq is not None else dc_carry
        tanh_c = np.tanh(c)
        do = dh * tanh_c
        dpo = do * o * (1.0 - o)
        dct = dc_ext + dh * o * (1.0 - tanh_c * tanh_c) + dpo * cell.wco
        dwco += np.sum(dpo * c, axis=0, dtype=np.float64).astype(dtype)
        dpz = dct * i * (1.0 - z * z)
        dpi = dct * z * i * (1.0 - i)
        dpf = dct * c_prev * f * (1.0 - f)
        dwci += np.sum(dpi * c_prev, axis=0, dtype=np.float64).astype(dtype)
        dwcf += np.sum(dpf * c_prev, axis=0, dtype=np.float64).astype(dtype)
        dc_carry = dct * f + dpi * cell.wci + dpf * cell.wcf
        dpre = np.concatenate([dpz, dpi, dpf, dpo], axis=3)
        dpre_a[:, step] = dpre
        dh_carry, dk = conv2d_grad(h_prev, wh, dpre, 1, "same")
        dwh += dk.weights
    a_flat = a_seq.reshape(b * t, hh, ww, -1)
    da_flat, dka = conv2d_grad(a_flat, _fused_input_kernel(cell), dpre_a.reshape(b * t, hh, ww, -1))
    for g, w_part, b_part in zip(_GATES, np.split(dka.weights, 4, 3), np.split(dka.bias, 4)):
        grads[f"{prefix}_wa{g}"] = w_part
        grads[f"{prefix}_b{g}"] = b_part
    for g, w_part in zip(_GATES, np.split(dwh, 4, 3)):
        grads[f"{prefix}_wh{g}"] = w_part
    grads[f"{prefix}_wci"] = dwci
    grads[f"{prefix}_wcf"] = dwcf
    grads[f"{prefix}_wco"] = dwco
    return da_flat.reshape(a_seq.shape)


# ---------------------------------------------------------------------------
# Conv / deconv stacks
# ---------------------------------------------------------------------------


def _conv_stack_forward(model: RcaeModel, x_flat: np.ndarray, want_cache: bool):
    cur = x_flat
    caches = []
    for i in range(1, N_CONV_LAYERS + 1):
        k = ConvKernel(model.params[f"enc_conv{i}_w"], model.params[f"enc_conv{i}_b"])
        pre = conv2d(cur, k, stride=2, padding="same")
        act = relu(pre)
        out, xhat, inv = _layer_norm_fwd(
            act, model.params[f"enc_ln{i}_g"], model.params[f"enc_ln{i}_b"], LAYER_NORM_EPS
        )
        if want_cache:
            caches.append((cur, pre, xhat, inv))
        cur = out
    return cur, caches


def _conv_stack_backward(model: RcaeModel, caches, dout, grads: dict):
    for i in range(N_CONV_LAYERS, 0, -1):
        cur, pre, xhat, inv = caches[i - 1]
        dact, dg, db = _layer_norm_bwd(xhat, inv, model.params[f"enc_ln{i}_g"], dout)
        grads[f"enc_ln{i}_g"] = dg
        grads[f"enc_ln{i}_b"] = db
        dpre = relu_grad(pre, dact)
        k = ConvKernel(model.params[f"enc_conv{i}_w"], model.params[f"enc_conv{i}_b"])
        dout, dk = conv2d_grad(cur, k, dpre, stride=2, padding="same")
        grads[f"enc_conv{i}_w"] = dk.weights
        grads[f"enc_conv{i}_b"] = dk.bias
    return dout


def _deconv_stack_forward(model: RcaeModel, d_flat: np.ndarray, want_cache: bool):
    arch = model.arch
    cur = d_flat
    caches = []
    for i in range(1, N_CONV_LAYERS + 1):
        k = ConvKernel(model.params[f"dec_deconv{i}_w"], model.params[f"dec_deconv{i}_b"])
        pre = transposed_conv2d(cur, k, stride=2)
        act = relu(pre)
        out, xhat, inv = _layer_norm_fwd(
            act, model.params[f"dec_ln{i}_g"], model.params[f"dec_ln{i}_b"], LAYER_NORM_EPS
        )
        if want_cache:
            caches.append((cur, pre, xhat, inv))
        cur = out
    resized = resize_nearest(cur, arch.block_size, arch.block_size)
    kf = ConvKernel(model.params["final_conv_w"], model.params["final_conv_b"])
    xhat_out = conv2d(resized, kf, stride=1, padding="same")
    if want_cache:
        caches.append(resized)
    return xhat_out, caches


def _deconv_stack_backward(model: RcaeModel, caches, dxhat, grads: dict):
    arch = model.arch
    resized = caches[-1]
    kf = ConvKernel(model.params["final_conv_w"], model.params["final_conv_b"])
    dresized, dkf = conv2d_grad(resized, kf, dxhat, stride=1, padding="same")
    grads["final_conv_w"] = dkf.weights
    grads["final_conv_b"] = dkf.bias
    dout = resize_nearest_grad(dresized, arch.pre_resize_hw, arch.pre_resize_hw)
    for i in range(N_CONV_LAYERS, 0, -1):
        cur, pre, xhat, inv = caches[i - 1]
        dact, dg, db = _layer_norm_bwd(xhat, inv, model.params[f"dec_ln{i}_g"], dout)
        grads[f"dec_ln{i}_g"] = dg
        grads[f"dec_ln{i}_b"] = db
        dpre = relu_grad(pre, dact)
        k = ConvKernel(model.params[f"dec_deconv{i}_w"], model.params[f"dec_deconv{i}_b"])
        dout, dk = transposed_conv2d_grad(cur, k, dpre, stride=2)
        grads[f"dec_deconv{i}_w"] = dk.weights
        grads[f"dec_deconv{i}_b"] = dk.bias
    return dout


# ---------------------------------------------------------------------------
# Full model forward/backward
# ---------------------------------------------------------------------------


def _dropout_mask(rng: np.random.Generator, shape, dtype) -> np.ndarray:
    keep = 1.0 - DROPOUT_P
    return (rng.random(shape) < keep).astype(dtype) / dtype.type(keep)


def _encoder_forward(model: RcaeModel, x: np.ndarray, train: bool, rng, want_cache: bool):
    """Conv stack + two ConvLSTM layers. x is (B, T, hb, wb, 1); returns the
    latent sequence (B, T, lh, lw, 2U) and a cache for backprop."""
    arch = model.arch
    b, t, hb, wb, _ = x.shape
    if (hb, wb) != (arch.block_size, arch.block_size):
        raise ShapeError(f"expected {arch.block_size}x{arch.block_size} blocks, got {hb}x{wb}")
    x = x.astype(model.dtype, copy=False)
    dtype = np.dtype(model.dtype)
    a_flat, conv_caches = _conv_stack_forward(model, x.reshape(b * t, hb, wb, 1), want_cache)
    lhw = arch.latent_hw
    a_seq = a_flat.reshape(b, t, lhw, lhw, arch.conv_filters)

    h1, c1, cache1 = _lstm_forward(model.cell("enc_lstm1"), a_seq, want_cache)
    mask1 = _dropout_mask(rng, c1.shape, dtype) if train else None
    c1_in = c1 * mask1 if train else c1
    h2, _, cache2 = _lstm_forward(model.cell("enc_lstm2"), c1_in, want_cache)
    latent = np.concatenate([h1, h2], axis=4)
    cache = (x, conv_caches, cache1, mask1, cache2) if want_cache else None
    return latent, cache


def _decoder_forward(model: RcaeModel, latent: np.ndarray, train: bool, rng, want_cache: bool):
    """Two ConvLSTM layers + deconv stack; latent is (B, T, lh, lw, 2U)."""
    arch = model.arch
    b, t = latent.shape[:2]
    dtype = np.dtype(model.dtype)
    h3, c3, cache3 = _lstm_forward(model.cell("dec_lstm3"), latent, want_cache)
    mask3 = _dropout_mask(rng, c3.shape, dtype) if train else None
    c3_in = c3 * mask3 if train else c3
    h4, _, cache4 = _lstm_forward(model.cell("dec_lstm4"), c3_in, want_cache)
    d_seq = np.concatenate([h3, h4], axis=4)
    xhat_flat, dec_caches = _deconv_stack_forward(
        model, d_seq.reshape(b * t, arch.latent_hw, arch.latent_hw, arch.latent_channels),
        want_cache,
    )
    xhat = xhat_flat.reshape(b, t, arch.block_size, arch.block_size, 1)
    cache = (cache3, mask3, cache4, dec_caches) if want_cache else None
    return xhat, cache


def _rcae_forward(model: RcaeModel, x: np.ndarray, train: bool, rng, want_cache: bool):
    """Returns (xhat, latent_seq, cache). x is (B, 20, hb, wb, 1)."""
    latent, enc_cache = _encoder_forward(model, x, train, rng, want_cache)
    xhat, dec_cache = _decoder_forward(model, latent, train, rng, want_cache)
    return xhat, latent, (enc_cache, dec_cache) if want_cache else None


def _rcae_backward(model: RcaeModel, cache, dxhat: np.ndarray):
    """Backward through decode then encode; returns (dx, grads)."""
    arch = model.arch
    enc_cache, dec_cache = cache
    x, conv_caches, cache1, mask1, cache2 = enc_cache
    cache3, mask3, cache4, dec_caches = dec_cache
    b, t = x.shape[:2]
    lhw = arch.latent_hw
    u = arch.lstm_filters
    grads: dict[str, np.ndarray] = {}

    dd_flat = _deconv_stack_backward(
        model, dec_caches, dxhat.reshape(b * t, *dxhat.shape[2:]), grads
    )
    dd_seq = dd_flat.reshape(b, t, lhw, lhw, 2 * u)
    dh3_ext, dh4_ext = dd_seq[..., :u], dd_seq[..., u:]
    dc3_in = _lstm_backward(model.cell("dec_lstm4"), cache4, dh4_ext, None, "dec_lstm4", grads)
    dc3_ext = dc3_in * mask3 if mask3 is not None else dc3_in
    dlat = _lstm_backward(model.cell("dec_lstm3"), cache3, dh3_ext, dc3_ext, "dec_lstm3", grads)

    dh1_ext, dh2_ext = dlat[..., :u], dlat[..., u:]
    dc1_in = _lstm_backward(model.cell("enc_lstm2"), cache2, dh2_ext, None, "enc_lstm2", grads)
    dc1_ext = dc1_in * mask1 if mask1 is not None else dc1_in
    da_seq = _lstm_backward(model.cell("enc_lstm1"), cache1, dh1_ext, dc1_ext, "enc_lstm1", grads)

    dx_flat = _conv_stack_backward(
        model, conv_caches, da_seq.reshape(b * t, lhw, lhw, arch.conv_filters), grads
    )
    return dx_flat.reshape(x.shape), grads


def reconstruction_loss(x: np.ndarray, xhat: np.ndarray) -> float:
    """Mean squared error over all elements."""
    x = np.asarray(x)
    xhat = np.asarray(xhat)
    if x.shape != xhat.shape:
        raise ShapeError(f"shape mismatch: {x.shape} vs {xhat.shape}")
    diff = (xhat.astype(np.float64) - x.astype(np.float64)).ravel()
    return float(np.dot(diff, diff) / diff.size)


def loss_and_grads(model: RcaeModel, x: np.ndarray, train: bool, rng):
    """MSE loss of the full encode->decode pipeline plus parameter gradients."""
    xhat, _, cache = _rcae_forward(model, x, train, rng, want_cache=True)
    x32 = x.astype(model.dtype, copy=False)
    loss = reconstruction_loss(x32, xhat)
    dxhat = (2.0 / xhat.size) * (xhat - x32)
    _, grads = _rcae_backward(model, cache, dxhat)
    return loss, grads


def encode(x: np.ndarray, model: RcaeModel, mode: str = "eval", seed: int | None = None) -> np.ndarray:
    """Encode one 20-step instance to its latent sequence (20, lh, lw, 2U).

    In train mode, dropout (drop probability 0.65, inverted scaling) is
    applied to the cell states fed to the following ConvLSTM layer; eval mode
    is deterministic.
    """
    x = np.asarray(x)
    if x.ndim != 4 or x.shape[0] != 20 or x.shape[3] != 1:
        raise ShapeError(f"instance must be (20, h, w, 1), got {x.shape}")
    train = _check_mode(mode)
    rng = np.random.default_rng(seed)
    latent, _ = _encoder_forward(model, x[None], train, rng, want_cache=False)
    return latent[0]


def _check_mode(mode: str) -> bool:
    if mode not in ("train", "eval"):
        raise ValueError(f"mode must be 'train' or 'eval', got {mode!r}")
    return mode == "train"


def encode_batch(x: np.ndarray, model: RcaeModel) -> np.ndarray:
    """Eval-mode latents for a batch of instances (B, 20, h, w, 1)."""
    latent, _ = _encoder_forward(model, x, False, np.random.default_rng(0), want_cache=False)
    return latent


def decode(latent: np.ndarray, model: RcaeModel) -> np.ndarray:
    """Decode a latent sequence (20, lh, lw, 2U) back to (20, hb, wb, 1)."""
    latent = np.asarray(latent)
    arch = model.arch
    if latent.ndim != 4 or latent.shape[1:] != (arch.latent_hw, arch.latent_hw, arch.latent_channels):
        raise ShapeError(
            f"latent must be (T, {arch.latent_hw}, {arch.latent_hw}, {arch.latent_channels}),"
            f" got {latent.shape}"
        )
    lat = latent[None].astype(model.dtype, copy=False)
    xhat, _ = _decoder_forward(model, lat, False, np.random.default_rng(0), want_cache=False)
    return xhat[0]


# ---------------------------------------------------------------------------
# Phase-1 (conv autoencoder) forward/backward: recurrent layers bypassed,
# Conv4 output feeds Deconv1 directly.
# ---------------------------------------------------------------------------


def _phase1_loss_and_grads(model: RcaeModel, frames: np.ndarray):
    a_flat, conv_caches = _conv_stack_forward(model, frames, True)
    xhat, dec_caches = _deconv_stack_forward(model, a_flat, True)
    loss = reconstruction_loss(frames, xhat)
    grads: dict[str, np.ndarray] = {}
    dxhat = (2.0 / xhat.size) * (xhat - frames)
    da = _deconv_stack_backward(model, dec_caches, dxhat, grads)
    _conv_stack_backward(model, conv_caches, da, grads)
    return loss, grads


# ---------------------------------------------------------------------------
# Training
# ---------------------------------------------------------------------------


def _adam_sweep(params: dict, grads: dict, states: dict) -> None:
    for name, g in grads.items():
        params[name], states[name] = adam_step(params[name], g, states[name])


def train_layerwise(bags, config, seed: int = 0) -> RcaeModel:
    """Greedy layer-wise training on the pooled bag instances.

    Phase 1 trains the conv encoder + deconv decoder as a per-frame
    autoencoder with the recurrent cells bypassed; phase 2 rebuilds the full
    recurrent model, loads the phase-1 weights back in, and trains end to end
    on the reconstruction MSE with ADAM. Loss traces for both phases are
    recorded on the returned model.
    """
    instances = [inst for bag in bags for inst in bag.instances]
    if not instances:
        raise ValueError("training set is empty")
    arch = RcaeArch(
        block_size=config.block_size,
        conv_filters=config.conv_filters,
        lstm_filters=config.lstm_filters,
    )
    rng = np.random.default_rng(np.random.SeedSequence(entropy=seed, spawn_key=(7,)))
    if config.max_train_instances and len(instances) > config.max_train_instances:
        order = rng.permutation(len(instances))[: config.max_train_instances]
        instances = [instances[k] for k in sorted(order)]
    x_all = np.stack([inst.frames for inst in instances]).astype(np.float32)
    n = x_all.shape[0]

    model = init_rcae(arch, seed=seed)
    states = {name: AdamState.init(p, lr=config.lr) for name, p in model.params.items()}
    trace1: list[float] = []
    frames = x_all.reshape(n * 20, arch.block_size, arch.block_size, 1)
    n_frames = frames.shape[0]
    for epoch in range(config.epochs_phase1):
        order = rng.permutation(n_frames)
        for lo in range(0, n_frames, config.batch_frames):
            batch = frames[order[lo : lo + config.batch_frames]]
            loss, grads = _phase1_loss_and_grads(model, batch)
            if not np.isfinite(loss):
                raise TrainingDivergedError(f"phase 1 loss became {loss} at epoch {epoch}")
            _adam_sweep(model.params, grads, states)
            trace1.append(loss)

    # Phase 2: full recurrent model, phase-1 weights loaded back in; the
    # recurrent cells keep their fresh init and the optimizer restarts.
    states = {name: AdamState.init(p, lr=config.lr) for name, p in model.params.items()}
    trace2: list[float] = []
    drop_rng = np.random.default_rng(np.random.SeedSequence(entropy=seed, spawn_key=(8,)))
    for epoch in range(config.epochs_phase2):
        order = rng.permutation(n)
        for lo in range(0, n, config.batch_instances):
            batch = x_all[order[lo : lo + config.batch_instances]]
            loss, grads = loss_and_grads(model, batch, train=config.train_dropout, rng=drop_rng)
            if not np.isfinite(loss):
                raise TrainingDivergedError(f"phase 2 loss became {loss} at epoch {epoch}")
            _adam_sweep(model.params, grads, states)
            trace2.append(loss)
    model.loss_trace = {"phase1": trace1, "phase2": trace2}
    return model
