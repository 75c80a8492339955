"""Numpy layer kernels with explicit per-sample backward passes.

Every backward keeps the batch axis in its weight-gradient contraction, so
per-sample gradients come out exact and vectorized. A layer's backward
returns (grad_wrt_input, [per_sample_grads ...]) where the list holds one
[n, p_i] array per parameterized primitive inside the layer, in the same
order as param_layers(). Parameter-free layers return an empty list.

Layer code is dtype-generic: arrays keep whatever float dtype the params
and inputs carry (float32 by default, float64 in gradient checks).
"""

from __future__ import annotations

import numpy as np

from ..errors import ShapeMismatchError


class Layer:
    """Base layer. Subclasses set self.params to a flat float vector."""

    kind = "layer"

    def __init__(self):
        self.params = np.zeros(0, dtype=np.float32)

    @property
    def n_params(self) -> int:
        return self.params.size

    def param_layers(self):
        return [self] if self.n_params else []

    def init_params(self, rng: np.random.Generator) -> None:
        pass

    def out_shape(self, shape):
        return shape

    def forward(self, x):
        raise NotImplementedError

    def backward(self, gout, cache):
        raise NotImplementedError

    def astype(self, dtype):
        self.params = self.params.astype(dtype)
        return self

    def _bad_input(self, x, expected: str):
        raise ShapeMismatchError(
            f"{self!r} expected {expected}, got input shape {tuple(x.shape)}"
        )


def _uniform_init(rng, n, fan_in, dtype):
    bound = 1.0 / np.sqrt(fan_in)
    return rng.uniform(-bound, bound, size=n).astype(dtype)


class DepthwiseConv(Layer):
    """Per-channel k x k convolution, stride 1, zero 'same' padding, no bias."""

    kind = "depthwise-conv"

    def __init__(self, channels: int, kernel: int):
        super().__init__()
        if kernel not in (3, 5):
            raise ValueError(f"depthwise kernel must be 3 or 5, got {kernel}")
        self.channels = channels
        self.kernel = kernel
        self.params = np.zeros(channels * kernel * kernel, dtype=np.float32)

    def __repr__(self):
        return f"DepthwiseConv(channels={self.channels}, kernel={self.kernel})"

    def init_params(self, rng):
        self.params = _uniform_init(
            rng, self.params.size, self.kernel * self.kernel, self.params.dtype
        )

    def out_shape(self, shape):
        c, h, w = shape
        if c != self.channels:
            raise ShapeMismatchError(f"{self!r} expected {self.channels} channels, got {c}")
        return (c, h, w)

    def forward(self, x):
        if x.ndim != 4 or x.shape[1] != self.channels:
            self._bad_input(x, f"[n, {self.channels}, h, w]")
        k, p = self.kernel, self.kernel // 2
        w = self.params.reshape(self.channels, k, k)
        n, c, H, W = x.shape
        xp = np.pad(x, ((0, 0), (0, 0), (p, p), (p, p)))
        y = np.zeros_like(x)
        for a in range(k):
            for b in range(k):
                y += w[:, a, b][None, :, None, None] * xp[:, :, a:a + H, b:b + W]
        return y, (xp, x.shape)

    def backward(self, gout, cache):
        xp, xshape = cache
        n, c, H, W = xshape
        k, p = self.kernel, self.kernel // 2
        w = self.params.reshape(self.channels, k, k)
        gxp = np.zeros_like(xp)
        gw = np.empty((n, c, k, k), dtype=gout.dtype)
        for a in range(k):
            for b in range(k):
                window = xp[:, :, a:a + H, b:b + W]
                gxp[:, :, a:a + H, b:b + W] += w[:, a, b][None, :, None, None] * gout
                gw[:, :, a, b] = np.einsum("nchw,nchw->nc", window, gout)
        gin = gxp[:, :, p:p + H, p:p + W]
        return gin, [gw.reshape(n, -1)]


class PointwiseConv(Layer):
    """1 x 1 convolution mixing channels; bias optional (projection shortcuts skip it)."""

    kind = "pointwise-conv"

    def __init__(self, c_in: int, c_out: int, bias: bool = True):
        super().__init__()
        self.c_in = c_in
        self.c_out = c_out
        self.bias = bias
        self.params = np.zeros(c_in * c_out + (c_out if bias else 0), dtype=np.float32)

    def __repr__(self):
        return f"PointwiseConv(c_in={self.c_in}, c_out={self.c_out}, bias={self.bias})"

    def _views(self):
        nw = self.c_in * self.c_out
        w = self.params[:nw].reshape(self.c_in, self.c_out)
        b = self.params[nw:] if self.bias else None
        return w, b

    def init_params(self, rng):
        nw = self.c_in * self.c_out
        w = _uniform_init(rng, nw, self.c_in, self.params.dtype)
        self.params = np.concatenate(
            [w, np.zeros(self.c_out, dtype=self.params.dtype)] if self.bias else [w]
        )

    def out_shape(self, shape):
        c, h, w = shape
        if c != self.c_in:
            raise ShapeMismatchError(f"{self!r} expected {self.c_in} channels, got {c}")
        return (self.c_out, h, w)

    def forward(self, x):
        if x.ndim != 4 or x.shape[1] != self.c_in:
            self._bad_input(x, f"[n, {self.c_in}, h, w]")
        w, b = self._views()
        y = np.einsum("nchw,cd->ndhw", x, w)
        if b is not None:
            y += b[None, :, None, None]
        return y, x

    def backward(self, gout, cache):
        x = cache
        w, _ = self._views()
        n = x.shape[0]
        gin = np.einsum("ndhw,cd->nchw", gout, w)
        gw = np.einsum("nchw,ndhw->ncd", x, gout).reshape(n, -1)
        if self.bias:
            gb = gout.sum(axis=(2, 3))
            return gin, [np.concatenate([gw, gb], axis=1)]
        return gin, [gw]


class PerSampleNorm(Layer):
    """Normalization over channel groups within each sample (no cross-sample statistics).

    Group size is min(8, C); each group is normalized over its channels and
    all spatial positions, then scaled/shifted by per-channel affine params.
    """

    kind = "per-sample-norm"
    EPS = 1e-5

    def __init__(self, channels: int):
        super().__init__()
        self.channels = channels
        self.group_size = min(8, channels)
        n_groups = -(-channels // self.group_size)
        self.group_slices = []
        start = 0
        for part in np.array_split(np.arange(channels), n_groups):
            self.group_slices.append(slice(start, start + part.size))
            start += part.size
        self.params = np.concatenate(
            [np.ones(channels, dtype=np.float32), np.zeros(channels, dtype=np.float32)]
        )

    def __repr__(self):
        return f"PerSampleNorm(channels={self.channels}, group_size={self.group_size})"

    def init_params(self, rng):
        c = self.channels
        self.params = np.concatenate(
            [np.ones(c, dtype=self.params.dtype), np.zeros(c, dtype=self.params.dtype)]
        )

    def out_shape(self, shape):
        c, h, w = shape
        if c != self.channels:
            raise ShapeMismatchError(f"{self!r} expected {self.channels} channels, got {c}")
        return (c, h, w)

    def forward(self, x):
        if x.ndim != 4 or x.shape[1] != self.channels:
            self._bad_input(x, f"[n, {self.channels}, h, w]")
        c = self.channels
        gamma = self.params[:c]
        beta = self.params[c:]
        y = np.empty_like(x)
        xhat_full = np.empty_like(x)
        istds = []
        for sl in self.group_slices:
            xs = x[:, sl]
            mu = xs.mean(axis=(1, 2, 3), keepdims=True)
            var = xs.var(axis=(1, 2, 3), keepdims=True)
            istd = 1.0 / np.sqrt(var + self.EPS)
            xhat = (xs - mu) * istd
            xhat_full[:, sl] = xhat
            y[:, sl] = gamma[sl][None, :, None, None] * xhat + beta[sl][None, :, None, None]
            istds.append(istd)
        return y, (xhat_full, istds)

    def backward(self, gout, cache):
        xhat_full, istds = cache
        c = self.channels
        gamma = self.params[:c]
        n = gout.shape[0]
        gin = np.empty_like(gout)
        for sl, istd in zip(self.group_slices, istds):
            g = gout[:, sl]
            xhat = xhat_full[:, sl]
            dxhat = g * gamma[sl][None, :, None, None]
            m1 = dxhat.mean(axis=(1, 2, 3), keepdims=True)
            m2 = (dxhat * xhat).mean(axis=(1, 2, 3), keepdims=True)
            gin[:, sl] = istd * (dxhat - m1 - xhat * m2)
        dgamma = np.einsum("nchw,nchw->nc", gout, xhat_full)
        dbeta = gout.sum(axis=(2, 3))
        return gin, [np.concatenate([dgamma, dbeta], axis=1)]


class ReLU(Layer):
    kind = "relu"

    def __repr__(self):
        return "ReLU()"

    def forward(self, x):
        mask = x > 0
        return x * mask, mask

    def backward(self, gout, cache):
        return gout * cache, []


class AvgPool(Layer):
    """2 x 2 average pooling, stride 2; odd trailing rows/columns are dropped."""

    kind = "avg-pool"

    def __repr__(self):
        return "AvgPool(2x2)"

    def out_shape(self, shape):
        c, h, w = shape
        if h < 2 or w < 2:
            raise ShapeMismatchError(f"{self!r} needs spatial dims >= 2, got {(h, w)}")
        return (c, h // 2, w // 2)

    def forward(self, x):
        if x.ndim != 4 or x.shape[2] < 2 or x.shape[3] < 2:
            self._bad_input(x, "[n, c, h>=2, w>=2]")
        n, c, H, W = x.shape
        H2, W2 = H // 2, W // 2
        xc = x[:, :, : H2 * 2, : W2 * 2]
        y = xc.reshape(n, c, H2, 2, W2, 2).mean(axis=(3, 5))
        return y, x.shape

    def backward(self, gout, cache):
        n, c, H, W = cache
        H2, W2 = H // 2, W // 2
        gin = np.zeros((n, c, H, W), dtype=gout.dtype)
        spread = np.broadcast_to(
            gout[:, :, :, None, :, None] / 4.0, (n, c, H2, 2, W2, 2)
        ).reshape(n, c, H2 * 2, W2 * 2)
        gin[:, :, : H2 * 2, : W2 * 2] = spread
        return gin, []


class MaxPool(Layer):
    """2 x 2 max pooling, stride 2; gradient routed to the argmax of each window."""

    kind = "max-pool"

    def __repr__(self):
        return "MaxPool(2x2)"

    def out_shape(self, shape):
        c, h, w = shape
        if h < 2 or w < 2:
            raise ShapeMismatchError(f"{self!r} needs spatial dims >= 2, got {(h, w)}")
        return (c, h // 2, w // 2)

    def forward(self, x):
        if x.ndim != 4 or x.shape[2] < 2 or x.shape[3] < 2:
            self._bad_input(x, "[n, c, h>=2, w>=2]")
        n, c, H, W = x.shape
        H2, W2 = H // 2, W // 2
        xw = (
            x[:, :, : H2 * 2, : W2 * 2]
            .reshape(n, c, H2, 2, W2, 2)
            .transpose(0, 1, 2, 4, 3, 5)
            .reshape(n, c, H2, W2, 4)
        )
        idx = xw.argmax(axis=-1)
        y = np.take_along_axis(xw, idx[..., None], axis=-1)[..., 0]
        return y, (idx, x.shape)

    def backward(self, gout, cache):
        idx, (n, c, H, W) = cache
        H2, W2 = H // 2, W // 2
        gw = np.zeros((n, c, H2, W2, 4), dtype=gout.dtype)
        np.put_along_axis(gw, idx[..., None], gout[..., None], axis=-1)
        gin = np.zeros((n, c, H, W), dtype=gout.dtype)
        gin[:, :, : H2 * 2, : W2 * 2] = (
            gw.reshape(n, c, H2, W2, 2, 2)
            .transpose(0, 1, 2, 4, 3, 5)
            .reshape(n, c, H2 * 2, W2 * 2)
        )
        return gin, []


class GlobalAvgPool(Layer):
    """Collapse spatial dims to a per-channel mean: [n, c, h, w] -> [n, c]."""

    kind = "global-avg-pool"

    def __repr__(self):
        return "GlobalAvgPool()"

    def out_shape(self, shape):
        c, h, w = shape
        return (c,)

    def forward(self, x):
        if x.ndim != 4:
            self._bad_input(x, "[n, c, h, w]")
        return x.mean(axis=(2, 3)), x.shape

    def backward(self, gout, cache):
        n, c, H, W = cache
        gin = np.broadcast_to(
            gout[:, :, None, None] / (H * W), (n, c, H, W)
        ).astype(gout.dtype, copy=True)
        return gin, []


class Linear(Layer):
    kind = "linear"

    def __init__(self, d_in: int, d_out: int):
        super().__init__()
        self.d_in = d_in
        self.d_out = d_out
        self.params = np.zeros(d_in * d_out + d_out, dtype=np.float32)

    def __repr__(self):
        return f"Linear(d_in={self.d_in}, d_out={self.d_out})"

    def _views(self):
        nw = self.d_in * self.d_out
        return self.params[:nw].reshape(self.d_in, self.d_out), self.params[nw:]

    def init_params(self, rng):
        w = _uniform_init(rng, self.d_in * self.d_out, self.d_in, self.params.dtype)
        self.params = np.concatenate([w, np.zeros(self.d_out, dtype=self.params.dtype)])

    def out_shape(self, shape):
        if len(shape) != 1 or shape[0] != self.d_in:
            raise ShapeMismatchError(f"{self!r} expected ({self.d_in},), got {shape}")
        return (self.d_out,)

    def forward(self, x):
        if x.ndim != 2 or x.shape[1] != self.d_in:
            self._bad_input(x, f"[n, {self.d_in}]")
        w, b = self._views()
        return x @ w + b, x

    def backward(self, gout, cache):
        x = cache
        w, _ = self._views()
        n = x.shape[0]
        gin = gout @ w.T
        gw = np.einsum("ni,no->nio", x, gout).reshape(n, -1)
        return gin, [np.concatenate([gw, gout], axis=1)]


class TransposeConv(Layer):
    """2 x 2 transposed convolution with stride 2 (exact x2 upsampling, no overlap)."""

    kind = "transpose-conv"

    def __init__(self, c_in: int, c_out: int):
        super().__init__()
        self.c_in = c_in
        self.c_out = c_out
        self.params = np.zeros(c_in * c_out * 4 + c_out, dtype=np.float32)

    def __repr__(self):
        return f"TransposeConv(c_in={self.c_in}, c_out={self.c_out})"

    def _views(self):
        nw = self.c_in * self.c_out * 4
        w = self.params[:nw].reshape(self.c_in, self.c_out, 2, 2)
        return w, self.params[nw:]

    def init_params(self, rng):
        nw = self.c_in * self.c_out * 4
        w = _uniform_init(rng, nw, self.c_in, self.params.dtype)
        self.params = np.concatenate([w, np.zeros(self.c_out, dtype=self.params.dtype)])

    def out_shape(self, shape):
        c, h, w = shape
        if c != self.c_in:
            raise ShapeMismatchError(f"{self!r} expected {self.c_in} channels, got {c}")
        return (self.c_out, h * 2, w * 2)

    def forward(self, x):
        if x.ndim != 4 or x.shape[1] != self.c_in:
            self._bad_input(x, f"[n, {self.c_in}, h, w]")
        w, b = self._views()
        n, c, H, W = x.shape
        y = np.einsum("ncij,cdab->ndiajb", x, w).reshape(n, self.c_out, H * 2, W * 2)
        y += b[None, :, None, None]
        return y, x

    def backward(self, gout, cache):
        x = cache
        w, _ = self._views()
        n, c, H, W = x.shape
        g6 = gout.reshape(n, self.c_out, H, 2, W, 2)
        gin = np.einsum("ndiajb,cdab->ncij", g6, w)
        gw = np.einsum("ncij,ndiajb->ncdab", x, g6).reshape(n, -1)
        gb = gout.sum(axis=(2, 3))
        return gin, [np.concatenate([gw, gb], axis=1)]


class Reshape(Layer):
    """Parameter-free view change of the per-sample shape (decoder stem)."""

    kind = "reshape"

    def __init__(self, shape):
        super().__init__()
        self.shape = tuple(shape)

    def __repr__(self):
        return f"Reshape(shape={self.shape})"

    def out_shape(self, shape):
        if int(np.prod(shape)) != int(np.prod(self.shape)):
            raise ShapeMismatchError(f"{self!r} cannot reshape {shape}")
        return self.shape

    def forward(self, x):
        return x.reshape(x.shape[0], *self.shape), x.shape

    def backward(self, gout, cache):
        return gout.reshape(cache), []


class ConvBlock(Layer):
    """Residual unit: relu(norm(pointwise(depthwise(x))) + shortcut(x)).

    The shortcut is identity when channel counts match, else a bias-free
    1 x 1 projection. Children own their parameter arrays; param_layers()
    flattens them so optimizers only see primitive layers.
    """

    kind = "conv-block"

    def __init__(self, c_in: int, c_out: int, kernel: int):
        super().__init__()
        self.c_in = c_in
        self.c_out = c_out
        self.kernel = kernel
        self.dw = DepthwiseConv(c_in, kernel)
        self.pw = PointwiseConv(c_in, c_out, bias=True)
        self.norm = PerSampleNorm(c_out)
        self.proj = PointwiseConv(c_in, c_out, bias=False) if c_in != c_out else None

    def __repr__(self):
        return f"ConvBlock(c_in={self.c_in}, c_out={self.c_out}, kernel={self.kernel})"

    def _children(self):
        kids = [self.dw, self.pw, self.norm]
        if self.proj is not None:
            kids.append(self.proj)
        return kids

    def param_layers(self):
        out = []
        for child in self._children():
            out.extend(child.param_layers())
        return out

    @property
    def n_params(self):
        return sum(child.n_params for child in self._children())

    @property
    def params(self):
        return np.concatenate([child.params for child in self._children()])

    @params.setter
    def params(self, vec):
        if getattr(self, "dw", None) is None:
            return  # base-class __init__ assigns before children exist
        off = 0
        for child in self._children():
            child.params = np.asarray(vec[off : off + child.n_params])
            off += child.n_params

    def init_params(self, rng):
        for child in self._children():
            child.init_params(rng)

    def astype(self, dtype):
        for child in self._children():
            child.astype(dtype)
        return self

    def out_shape(self, shape):
        c, h, w = shape
        if c != self.c_in:
            raise ShapeMismatchError(f"{self!r} expected {self.c_in} channels, got {c}")
        return (self.c_out, h, w)

    def forward(self, x):
        if x.ndim != 4 or x.shape[1] != self.c_in:
            self._bad_input(x, f"[n, {self.c_in}, h, w]")
        h1, c_dw = self.dw.forward(x)
        h2, c_pw = self.pw.forward(h1)
        h3, c_norm = self.norm.forward(h2)
        if self.proj is not None:
            s, c_proj = self.proj.forward(x)
        else:
            s, c_proj = x, None
        pre = h3 + s
        mask = pre > 0
        return pre * mask, (c_dw, c_pw, c_norm, c_proj, mask)

    def backward(self, gout, cache):
        c_dw, c_pw, c_norm, c_proj, mask = cache
        g = gout * mask
        g_norm, psg_norm = self.norm.backward(g, c_norm)
        g_pw, psg_pw = self.pw.backward(g_norm, c_pw)
        g_dw, psg_dw = self.dw.backward(g_pw, c_dw)
        if self.proj is not None:
            g_proj, psg_proj = self.proj.backward(g, c_proj)
            gin = g_dw + g_proj
        else:
            psg_proj = []
            gin = g_dw + g
        return gin, psg_dw + psg_pw + psg_norm + psg_proj


class Sequential:
    """Ordered layer stack with flattened parameter access."""

    def __init__(self, layers):
        self.layers = list(layers)

    def __repr__(self):
        return f"Sequential({self.layers!r})"

    def param_layers(self):
        out = []
        for layer in self.layers:
            out.extend(layer.param_layers())
        return out

    @property
    def n_params(self):
        return sum(l.n_params for l in self.param_layers())

    def out_shape(self, shape):
        for layer in self.layers:
            shape = layer.out_shape(shape)
        return shape

    def init_params(self, rng):
        for layer in self.layers:
            layer.init_params(rng)

    def forward(self, x):
        caches = []
        for layer in self.layers:
            x, cache = layer.forward(x)
            caches.append(cache)
        return x, caches

    def backward(self, gout, caches):
        psg_rev = []
        for layer, cache in zip(reversed(self.layers), reversed(caches)):
            gout, psg = layer.backward(gout, cache)
            psg_rev.append(psg)
        flat = []
        for psg in reversed(psg_rev):
            flat.extend(psg)
        return gout, flat

    def get_flat(self):
        layers = self.param_layers()
        if not layers:
            return np.zeros(0, dtype=np.float32)
        return np.concatenate([l.params for l in layers])

    def set_flat(self, vec):
        vec = np.asarray(vec)
        if vec.size != self.n_params:
            raise ShapeMismatchError(
                f"flat vector has {vec.size} values, stack holds {self.n_params} params"
            )
        off = 0
        for layer in self.param_layers():
            layer.params = vec[off : off + layer.n_params].astype(
                layer.params.dtype, copy=True
            )
            off += layer.n_params

    def astype(self, dtype):
        for layer in self.layers:
            layer.astype(dtype)
        return self
