"""
Couches paramétrées: convolutions, attention, normalisation, pooling pyramidal.

Chaque module enregistre ses `Parameter` et sous-modules dans l'ordre de
déclaration; les noms pointés (`enc1.conv_a.weight`) sont stables et servent de
clés dans les checkpoints.
"""
import math
from typing import Dict, Iterator, List, Optional, Sequence, Tuple

import numpy as np

from config import settings
from models import PositionalEncoding
from nn import functional as F
from nn.tensor import Parameter, Tensor, add, matmul, mul, relu, reshape, softmax, transpose

def seeded_rng(seed: int) -> np.random.Generator:
    return np.random.Generator(np.random.PCG64(seed))

def he_uniform(rng: np.random.Generator, shape: Tuple[int, ...], fan_in: int) -> np.ndarray:
    bound = math.sqrt(6.0 / fan_in)
    return rng.uniform(-bound, bound, size=shape)

class Module:
    def __init__(self):
        object.__setattr__(self, "_params", {})
        object.__setattr__(self, "_modules", {})

    def __setattr__(self, name, value):
        if isinstance(value, Parameter):
            self._params[name] = value
        elif isinstance(value, Module):
            self._modules[name] = value
        object.__setattr__(self, name, value)

    def __call__(self, *args, **kwargs):
        return self.forward(*args, **kwargs)

    def forward(self, *args, **kwargs):
        raise NotImplementedError

    def named_parameters(self, prefix: str = "") -> Iterator[Tuple[str, Parameter]]:
        for name, p in self._params.items():
            yield prefix + name, p
        for name, m in self._modules.items():
            yield from m.named_parameters(f"{prefix}{name}.")

    def parameters(self) -> List[Parameter]:
        return [p for _, p in self.named_parameters()]

    def num_parameters(self) -> int:
        return sum(p.size for p in self.parameters())

    def zero_grad(self) -> None:
        for p in self.parameters():
            p.zero_grad()

    def state_dict(self) -> Dict[str, np.ndarray]:
        return {name: p.data for name, p in self.named_parameters()}

    def load_state_dict(self, state: Dict[str, np.ndarray]) -> None:
        own = dict(self.named_parameters())
        missing = sorted(set(own) - set(state))
        unexpected = sorted(set(state) - set(own))
        if missing or unexpected:
            raise ValueError(f"Paramètres incompatibles: manquants {missing[:5]}, inattendus {unexpected[:5]}")
        for name, p in own.items():
            value = np.asarray(state[name])
            if value.shape != p.shape:
                raise ValueError(f"Forme incompatible pour {name}: {value.shape} au lieu de {p.shape}")
            p.data = np.ascontiguousarray(value, dtype=p.dtype)

    def to_dtype(self, dtype) -> "Module":
        for p in self.parameters():
            p.data = np.ascontiguousarray(p.data, dtype=dtype)
            p.grad = None
        return self

    @property
    def dtype(self):
        params = self.parameters()
        return params[0].dtype if params else np.dtype(settings.DEFAULT_DTYPE)

class ModuleList(Module):
    def __init__(self, modules: Sequence[Module] = ()):
        super().__init__()
        object.__setattr__(self, "_items", [])
        for m in modules:
            self.append(m)

    def append(self, module: Module) -> None:
        setattr(self, str(len(self._items)), module)
        self._items.append(module)

    def __iter__(self):
        return iter(self._items)

    def __len__(self) -> int:
        return len(self._items)

    def __getitem__(self, i: int) -> Module:
        return self._items[i]

# ---------------------------------------------------------------------------
# Convolutions
# ---------------------------------------------------------------------------

class Conv2d(Module):
    """Convolution 2D; padding=None donne une sortie de même taille (pas 1)"""

    def __init__(self, in_channels: int, out_channels: int, kernel: int = 3, stride: int = 1,
                 padding: Optional[int] = None, dilation: int = 1, rng: Optional[np.random.Generator] = None):
        super().__init__()
        if min(in_channels, out_channels, kernel, stride, dilation) < 1:
            raise ValueError(f"Conv2d invalide: {in_channels}->{out_channels}, k={kernel}, s={stride}, d={dilation}")
        rng = rng if rng is not None else seeded_rng(0)
        self.in_channels = in_channels
        self.out_channels = out_channels
        self.kernel = (kernel, kernel)
        self.stride = stride
        self.dilation = dilation
        self.padding = dilation * (kernel - 1) // 2 if padding is None else padding
        fan_in = in_channels * kernel * kernel
        self.weight = Parameter(he_uniform(rng, (out_channels, in_channels, kernel, kernel), fan_in))
        self.bias = Parameter(np.zeros(out_channels))

    @property
    def receptive_field(self) -> int:
        return self.dilation * (self.kernel[0] - 1) + 1

    def output_size(self, h: int, w: int) -> Tuple[int, int]:
        k = self.kernel[0]
        return (F.conv_output_size(h, k, self.stride, self.padding, self.dilation),
                F.conv_output_size(w, k, self.stride, self.padding, self.dilation))

    def forward(self, x: Tensor) -> Tensor:
        return F.conv2d(x, self.weight, self.bias, self.stride, self.padding, self.dilation)

class ConvTranspose2d(Module):
    """Convolution transposée qui multiplie la résolution par `stride`"""

    def __init__(self, in_channels: int, out_channels: int, kernel: int = 2, stride: int = 2,
                 padding: int = 0, output_padding: int = 0, rng: Optional[np.random.Generator] = None):
        super().__init__()
        if kernel - 2 * padding + output_padding != stride:
            raise ValueError(
                f"Géométrie incohérente: k={kernel}, p={padding}, op={output_padding} ne multiplie pas la taille par {stride}"
            )
        rng = rng if rng is not None else seeded_rng(0)
        self.in_channels = in_channels
        self.out_channels = out_channels
        self.kernel = (kernel, kernel)
        self.stride = stride
        self.padding = padding
        self.output_padding = output_padding
        self.weight = Parameter(he_uniform(rng, (in_channels, out_channels, kernel, kernel), in_channels * kernel * kernel))
        self.bias = Parameter(np.zeros(out_channels))

    def forward(self, x: Tensor) -> Tensor:
        return F.conv_transpose2d(x, self.weight, self.bias, self.stride, self.padding,
                                  output_padding=self.output_padding)

class UpConv(ConvTranspose2d):
    """Suréchantillonnage x2 du décodeur (noyau 2x2, pas 2)"""

    def __init__(self, in_channels: int, out_channels: int, rng: Optional[np.random.Generator] = None):
        super().__init__(in_channels, out_channels, kernel=2, stride=2, rng=rng)

class DoubleConv(Module):
    """Deux convolutions 3x3 + ReLU à résolution constante"""

    def __init__(self, in_channels: int, out_channels: int, rng: np.random.Generator):
        super().__init__()
        self.conv_a = Conv2d(in_channels, out_channels, 3, rng=rng)
        self.conv_b = Conv2d(out_channels, out_channels, 3, rng=rng)

    def forward(self, x: Tensor) -> Tensor:
        return relu(self.conv_b(relu(self.conv_a(x))))

class PyramidPooling(Module):
    """Moyenne par grille b x b, convolution 1x1, retour à H x W; une sortie de C canaux par grille"""

    def __init__(self, channels: int, bins: Sequence[int] = (1, 2, 4), rng: Optional[np.random.Generator] = None):
        super().__init__()
        if not bins:
            raise ValueError("Au moins une grille de pooling est requise")
        rng = rng if rng is not None else seeded_rng(0)
        self.bins = tuple(int(b) for b in bins)
        self.convs = ModuleList([Conv2d(channels, channels, 1, padding=0, rng=rng) for _ in self.bins])

    def forward(self, x: Tensor) -> Tensor:
        _, _, h, w = x.shape
        outs = []
        for b, conv in zip(self.bins, self.convs):
            if h % b or w % b:
                raise ValueError(f"La grille {b} ne divise pas {h}x{w}")
            outs.append(F.upsample_nearest(conv(F.avg_pool2d(x, b)), h // b))
        return F.channel_concat(outs)

# ---------------------------------------------------------------------------
# Transformer
# ---------------------------------------------------------------------------

class Linear(Module):
    def __init__(self, in_features: int, out_features: int, bias: bool = True,
                 rng: Optional[np.random.Generator] = None):
        super().__init__()
        rng = rng if rng is not None else seeded_rng(0)
        self.weight = Parameter(he_uniform(rng, (in_features, out_features), in_features))
        if bias:
            self.bias = Parameter(np.zeros(out_features))
        else:
            self.bias = None

    def forward(self, x: Tensor) -> Tensor:
        return F.linear(x, self.weight, self.bias)

class LayerNorm(Module):
    def __init__(self, dim: int, eps: float = settings.LAYER_NORM_EPS):
        super().__init__()
        if dim < 1:
            raise ValueError(f"Dimension de normalisation invalide: {dim}")
        self.eps = eps
        self.gain = Parameter(np.ones(dim))
        self.shift = Parameter(np.zeros(dim))

    def forward(self, x: Tensor) -> Tensor:
        return F.layer_norm(x, self.gain, self.shift, self.eps)

class Dropout(Module):
    def __init__(self, rate: float = settings.DROPOUT_RATE):
        super().__init__()
        if not 0 <= rate < 1:
            raise ValueError(f"Taux de dropout invalide {rate}: attendu 0 <= rate < 1")
        self.rate = rate

    def forward(self, x: Tensor, training: bool = False, rng: Optional[np.random.Generator] = None) -> Tensor:
        return F.dropout(x, self.rate, training, rng)

class MultiHeadSelfAttention(Module):
    """Auto-attention multi-têtes sans biais: softmax(Q K^T / sqrt(d)) V, puis projection Wo"""

    def __init__(self, embed_dim: int = settings.EMBED_DIM, num_heads: int = settings.NUM_HEADS,
                 rng: Optional[np.random.Generator] = None):
        super().__init__()
        if embed_dim % num_heads:
            raise ValueError(f"embed_dim {embed_dim} n'est pas divisible par num_heads {num_heads}")
        rng = rng if rng is not None else seeded_rng(0)
        self.embed_dim = embed_dim
        self.num_heads = num_heads
        self.head_dim = embed_dim // num_heads
        shape = (embed_dim, embed_dim)
        self.wq = Parameter(he_uniform(rng, shape, embed_dim))
        self.wk = Parameter(he_uniform(rng, shape, embed_dim))
        self.wv = Parameter(he_uniform(rng, shape, embed_dim))
        self.wo = Parameter(he_uniform(rng, shape, embed_dim))

    def _split(self, t: Tensor, n: int, tokens: int) -> Tensor:
        # [N, T, D] -> [N*H, T, d]
        t = reshape(t, (n, tokens, self.num_heads, self.head_dim))
        return reshape(transpose(t, (0, 2, 1, 3)), (n * self.num_heads, tokens, self.head_dim))

    def forward(self, x: Tensor, return_weights: bool = False):
        if x.ndim != 3 or x.shape[-1] != self.embed_dim:
            raise ValueError(f"Entrée [N, T, {self.embed_dim}] attendue, reçu {x.shape}")
        n, tokens, _ = x.shape
        q = self._split(matmul(x, self.wq), n, tokens)
        k = self._split(matmul(x, self.wk), n, tokens)
        v = self._split(matmul(x, self.wv), n, tokens)
        scores = mul(matmul(q, transpose(k, (0, 2, 1))), 1.0 / math.sqrt(self.head_dim))
        weights = softmax(scores, axis=-1)
        heads = reshape(matmul(weights, v), (n, self.num_heads, tokens, self.head_dim))
        merged = reshape(transpose(heads, (0, 2, 1, 3)), (n, tokens, self.embed_dim))
        out = matmul(merged, self.wo)
        if return_weights:
            return out, weights.data.reshape(n, self.num_heads, tokens, tokens)
        return out

class TransformerEncoderUnit(Module):
    """Unité pré-normalisée: x + MHSA(LN(x)), puis h + MLP(LN(h))"""

    def __init__(self, embed_dim: int = settings.EMBED_DIM, num_heads: int = settings.NUM_HEADS,
                 mlp_ratio: int = settings.MLP_RATIO, dropout: float = settings.DROPOUT_RATE,
                 rng: Optional[np.random.Generator] = None):
        super().__init__()
        rng = rng if rng is not None else seeded_rng(0)
        self.norm1 = LayerNorm(embed_dim)
        self.attn = MultiHeadSelfAttention(embed_dim, num_heads, rng=rng)
        self.norm2 = LayerNorm(embed_dim)
        self.fc1 = Linear(embed_dim, mlp_ratio * embed_dim, rng=rng)
        self.fc2 = Linear(mlp_ratio * embed_dim, embed_dim, rng=rng)
        self.drop = Dropout(dropout)

    def forward(self, x: Tensor, training: bool = False, rng: Optional[np.random.Generator] = None) -> Tensor:
        h = add(x, self.drop(self.attn(self.norm1(x)), training, rng))
        mlp = self.fc2(relu(self.fc1(self.norm2(h))))
        return add(h, self.drop(mlp, training, rng))

def fourier_positional_encoding(num_tokens: int = 64, embed_dim: int = settings.EMBED_DIM) -> PositionalEncoding:
    """table[p, 2i] = sin(p / 10000^(2i/D)), table[p, 2i+1] = cos(...)"""
    if embed_dim % 2:
        raise ValueError(f"embed_dim doit être pair, reçu {embed_dim}")
    positions = np.arange(num_tokens, dtype=np.float64)[:, None]
    freqs = np.power(10000.0, -np.arange(0, embed_dim, 2, dtype=np.float64) / embed_dim)[None, :]
    table = np.empty((num_tokens, embed_dim))
    table[:, 0::2] = np.sin(positions * freqs)
    table[:, 1::2] = np.cos(positions * freqs)
    return PositionalEncoding(num_tokens=num_tokens, embed_dim=embed_dim, table=table)

class PatchEmbed(Module):
    """Découpe un patch [N,1,P,P] en sous-patches s x s, projection linéaire + encodage de position"""

    def __init__(self, patch_size: int = settings.PATCH_SIZE, sub_patch: int = settings.SUB_PATCH,
                 embed_dim: int = settings.EMBED_DIM, rng: Optional[np.random.Generator] = None):
        super().__init__()
        if patch_size % sub_patch:
            raise ValueError(f"Le sous-patch {sub_patch} ne divise pas le patch {patch_size}")
        self.patch_size = patch_size
        self.sub_patch = sub_patch
        self.grid = patch_size // sub_patch
        self.num_tokens = self.grid * self.grid
        self.proj = Linear(sub_patch * sub_patch, embed_dim, rng=rng)
        # Tampon fixe, hors des paramètres
        self.encoding = fourier_positional_encoding(self.num_tokens, embed_dim)

    def forward(self, x: Tensor) -> Tensor:
        n = x.shape[0]
        if x.shape[1:] != (1, self.patch_size, self.patch_size):
            raise ValueError(f"Entrée [N,1,{self.patch_size},{self.patch_size}] attendue, reçu {x.shape}")
        g, s = self.grid, self.sub_patch
        tiles = reshape(x, (n, g, s, g, s))
        tokens = reshape(transpose(tiles, (0, 1, 3, 2, 4)), (n, self.num_tokens, s * s))
        return add(self.proj(tokens), Tensor(self.encoding.table.astype(x.dtype)))
