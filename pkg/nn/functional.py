"""
Noyaux fonctionnels des couches (convolutions, pooling, normalisation, dropout).

Les convolutions passent par im2col: chaque tap du noyau est une tranche
décalée de l'entrée, la contraction se fait ensuite avec np.tensordot.
"""
from typing import Optional, Sequence, Union

import numpy as np

from config import settings
from nn.tensor import (
    Tensor, add, apply_op, concat, matmul, mean, mul, power, reshape, sub,
)

def conv_output_size(n: int, k: int, stride: int = 1, padding: int = 0, dilation: int = 1) -> int:
    return (n + 2 * padding - dilation * (k - 1) - 1) // stride + 1

def _im2col(xp: np.ndarray, kh: int, kw: int, stride: int, dilation: int, ho: int, wo: int) -> np.ndarray:
    n, c = xp.shape[:2]
    cols = np.empty((n, c, kh, kw, ho, wo), dtype=xp.dtype)
    for i in range(kh):
        r = i * dilation
        for j in range(kw):
            s = j * dilation
            cols[:, :, i, j] = xp[:, :, r:r + stride * (ho - 1) + 1:stride, s:s + stride * (wo - 1) + 1:stride]
    return cols

def _col2im(cols: np.ndarray, shape, stride: int, dilation: int) -> np.ndarray:
    _, _, kh, kw, ho, wo = cols.shape
    xp = np.zeros(shape, dtype=cols.dtype)
    for i in range(kh):
        r = i * dilation
        for j in range(kw):
            s = j * dilation
            xp[:, :, r:r + stride * (ho - 1) + 1:stride, s:s + stride * (wo - 1) + 1:stride] += cols[:, :, i, j]
    return xp

def conv2d(x: Tensor, weight: Tensor, bias: Optional[Tensor] = None,
           stride: int = 1, padding: int = 0, dilation: int = 1) -> Tensor:
    """Corrélation croisée 2D (sans retournement du noyau), x: [N,C,H,W], weight: [O,C,kh,kw]"""
    if x.ndim != 4:
        raise ValueError(f"conv2d attend une entrée [N,C,H,W], reçu {x.shape}")
    n, c, h, w = x.shape
    o, ci, kh, kw = weight.shape
    if c != ci:
        raise ValueError(f"Canaux incompatibles: entrée {c}, noyau {ci}")
    ho = conv_output_size(h, kh, stride, padding, dilation)
    wo = conv_output_size(w, kw, stride, padding, dilation)
    if ho < 1 or wo < 1:
        raise ValueError(f"Sortie vide pour une entrée {h}x{w} (noyau {kh}x{kw}, dilatation {dilation})")

    xp = np.pad(x.data, ((0, 0), (0, 0), (padding, padding), (padding, padding))) if padding else x.data
    cols = _im2col(xp, kh, kw, stride, dilation, ho, wo)
    out = np.tensordot(cols, weight.data, axes=([1, 2, 3], [1, 2, 3])).transpose(0, 3, 1, 2)
    if bias is not None:
        out = out + bias.data[None, :, None, None]

    def rule(g):
        gw = np.tensordot(g, cols, axes=([0, 2, 3], [0, 4, 5]))
        gcols = np.tensordot(g, weight.data, axes=([1], [0])).transpose(0, 3, 4, 5, 1, 2)
        gxp = _col2im(gcols, xp.shape, stride, dilation)
        gx = gxp[:, :, padding:padding + h, padding:padding + w] if padding else gxp
        grads = [gx, gw]
        if bias is not None:
            grads.append(g.sum(axis=(0, 2, 3)))
        return tuple(grads)

    inputs = (x, weight) if bias is None else (x, weight, bias)
    return apply_op(out, inputs, rule)

def conv_transpose2d(x: Tensor, weight: Tensor, bias: Optional[Tensor] = None, stride: int = 2,
                     padding: int = 0, dilation: int = 1, output_padding: int = 0) -> Tensor:
    """
    Convolution transposée, adjointe exacte de conv2d pour le même noyau.

    weight est rangé [in, out, kh, kw]: c'est le noyau d'une convolution out -> in.
    """
    if x.ndim != 4:
        raise ValueError(f"conv_transpose2d attend une entrée [N,C,H,W], reçu {x.shape}")
    n, c, h, w = x.shape
    ci, o, kh, kw = weight.shape
    if c != ci:
        raise ValueError(f"Canaux incompatibles: entrée {c}, noyau {ci}")
    if not 0 <= output_padding < max(stride, dilation):
        raise ValueError(f"output_padding {output_padding} incohérent avec stride {stride}")
    full_h = (h - 1) * stride + dilation * (kh - 1) + 1 + output_padding
    full_w = (w - 1) * stride + dilation * (kw - 1) + 1 + output_padding
    ho, wo = full_h - 2 * padding, full_w - 2 * padding
    if ho < 1 or wo < 1:
        raise ValueError(f"Géométrie incohérente: sortie {ho}x{wo}")

    cols = np.tensordot(x.data, weight.data, axes=([1], [0])).transpose(0, 3, 4, 5, 1, 2)
    out = _col2im(cols, (n, o, full_h, full_w), stride, dilation)[:, :, padding:padding + ho, padding:padding + wo]
    if bias is not None:
        out = out + bias.data[None, :, None, None]

    def rule(g):
        gp = np.zeros((n, o, full_h, full_w), dtype=g.dtype)
        gp[:, :, padding:padding + ho, padding:padding + wo] = g
        gcols = _im2col(gp, kh, kw, stride, dilation, h, w)
        gx = np.tensordot(gcols, weight.data, axes=([1, 2, 3], [1, 2, 3])).transpose(0, 3, 1, 2)
        gw = np.tensordot(x.data, gcols, axes=([0, 2, 3], [0, 4, 5]))
        grads = [gx, gw]
        if bias is not None:
            grads.append(g.sum(axis=(0, 2, 3)))
        return tuple(grads)

    inputs = (x, weight) if bias is None else (x, weight, bias)
    return apply_op(out, inputs, rule)

def max_pool2d(x: Tensor) -> Tensor:
    """Max pooling 2x2, pas 2; le gradient va au premier maximum (ordre de balayage)"""
    n, c, h, w = x.shape
    if h % 2 or w % 2:
        raise ValueError(f"max_pool2d attend des dimensions paires, reçu {h}x{w}")
    windows = x.data.reshape(n, c, h // 2, 2, w // 2, 2).transpose(0, 1, 2, 4, 3, 5).reshape(n, c, h // 2, w // 2, 4)
    idx = windows.argmax(axis=-1)[..., None]
    out = np.take_along_axis(windows, idx, axis=-1)[..., 0]

    def rule(g):
        gw = np.zeros_like(windows)
        np.put_along_axis(gw, idx, g[..., None], axis=-1)
        return (gw.reshape(n, c, h // 2, w // 2, 2, 2).transpose(0, 1, 2, 4, 3, 5).reshape(n, c, h, w),)

    return apply_op(out, (x,), rule)

def avg_pool2d(x: Tensor, bins: int) -> Tensor:
    """Moyenne par blocs jusqu'à une grille bins x bins"""
    n, c, h, w = x.shape
    if h % bins or w % bins:
        raise ValueError(f"La grille {bins} ne divise pas {h}x{w}")
    blocks = reshape(x, (n, c, bins, h // bins, bins, w // bins))
    return mean(blocks, axis=(3, 5))

def upsample_nearest(x: Tensor, factor: int) -> Tensor:
    if factor == 1:
        return x
    n, c, h, w = x.shape
    out = x.data.repeat(factor, axis=2).repeat(factor, axis=3)
    return apply_op(out, (x,), lambda g: (g.reshape(n, c, h, factor, w, factor).sum(axis=(3, 5)),))

def linear(x: Tensor, weight: Tensor, bias: Optional[Tensor] = None) -> Tensor:
    out = matmul(x, weight)
    return add(out, bias) if bias is not None else out

def layer_norm(x: Tensor, gain: Tensor, shift: Tensor, eps: float = settings.LAYER_NORM_EPS) -> Tensor:
    """(x - moyenne) / sqrt(var + eps) * gain + shift sur le dernier axe"""
    if x.shape[-1] != gain.shape[-1] or gain.shape != shift.shape:
        raise ValueError(f"Formes incompatibles: x {x.shape}, gain {gain.shape}, shift {shift.shape}")
    mu = mean(x, axis=-1, keepdims=True)
    centered = sub(x, mu)
    var = mean(mul(centered, centered), axis=-1, keepdims=True)
    inv = power(add(var, eps), -0.5)
    return add(mul(mul(centered, inv), gain), shift)

def dropout(x: Tensor, rate: float, training: bool,
            seed: Union[int, np.random.Generator, None] = None) -> Tensor:
    """Dropout inversé: actif seulement à l'entraînement"""
    if not 0 <= rate < 1:
        raise ValueError(f"Taux de dropout invalide {rate}: attendu 0 <= rate < 1")
    if not training or rate == 0:
        return x
    if seed is None:
        raise ValueError("Une graine est requise pour le dropout à l'entraînement")
    rng = seed if isinstance(seed, np.random.Generator) else np.random.Generator(np.random.PCG64(seed))
    keep = (rng.random(x.shape) >= rate).astype(x.dtype) / x.dtype.type(1 - rate)
    return mul(x, Tensor(keep))

def channel_concat(tensors: Sequence[Tensor]) -> Tensor:
    return concat(tensors, axis=1)

def tokens_to_grid(tokens: Tensor, grid: int) -> Tensor:
    """[N, T, D] -> [N, D, grid, grid], jeton t = ligne * grid + colonne"""
    n, t, d = tokens.shape
    if t != grid * grid:
        raise ValueError(f"{t} jetons ne forment pas une grille {grid}x{grid}")
    return reshape(tokens.transpose(0, 2, 1), (n, d, grid, grid))
