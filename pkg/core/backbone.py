"""
AU検出器バックボーン

畳み込みブロック（conv → batchnorm → 活性化 → max-pool）を積み重ね、
全結合層とシグモイドで1つの属性（AU）の陽性確率を出力する。
特徴ベクトル入力では同じ幅の隠れ層を持つMLPに置き換える。

パラメータは ParameterVector（フラットな1本のベクトル + レイアウト）として扱い、
損失・勾配・ヘッセ行列ベクトル積はすべて純粋関数として評価する。
"""
import hashlib
import math
from dataclasses import dataclass, field
from functools import lru_cache
from typing import Dict, List, Optional, Sequence, Tuple, Union

import numpy as np
import torch
import torch.nn.functional as F

from config import Config
from utils.logger import get_logger

logger = get_logger(__name__)

INPUT_KINDS = ('image', 'vector')
ACTIVATIONS = ('relu', 'tanh')
DTYPES = {'float32': torch.float32, 'float64': torch.float64}
MODES = ('train', 'eval')


class BackboneConfigError(ValueError):
    """不正なバックボーン設定"""


class ShapeMismatchError(ValueError):
    """入力形状が設定と一致しない"""


class LayoutMismatchError(ValueError):
    """パラメータレイアウトが一致しない"""


@dataclass(frozen=True)
class BackboneConfig:
    """
    バックボーン設定

    input_shape は画像なら (C, H, W)、特徴ベクトルなら (d,)。
    conv_channels はベクトル入力ではMLPの隠れ層幅として使われる。
    """
    input_kind: str = 'image'
    input_shape: Tuple[int, ...] = (1, 32, 32)
    conv_channels: Tuple[int, ...] = (64, 48, 32, 16)
    kernel_size: int = 5
    pool_size: int = 2
    use_batchnorm: bool = True
    fc_output_dim: int = 1
    activation: str = 'relu'
    dtype: str = 'float32'
    seed: int = 0

    def __post_init__(self):
        object.__setattr__(self, 'input_shape', tuple(int(s) for s in self.input_shape))
        object.__setattr__(self, 'conv_channels', tuple(int(c) for c in self.conv_channels))
        self.validate()

    def validate(self):
        """設定を検証（不正な場合は BackboneConfigError）"""
        if self.input_kind not in INPUT_KINDS:
            raise BackboneConfigError(f"input_kind must be one of {INPUT_KINDS}, got {self.input_kind!r}")
        if self.input_kind == 'image':
            if len(self.input_shape) != 3:
                raise BackboneConfigError(f"image input_shape must be (C, H, W), got {self.input_shape}")
            if not self.conv_channels:
                raise BackboneConfigError("conv_channels must be non-empty for image inputs")
        elif len(self.input_shape) != 1:
            raise BackboneConfigError(f"vector input_shape must be (d,), got {self.input_shape}")
        if any(s < 1 for s in self.input_shape):
            raise BackboneConfigError(f"input_shape entries must be >= 1, got {self.input_shape}")
        if any(c < 1 for c in self.conv_channels):
            raise BackboneConfigError(f"conv_channels entries must be >= 1, got {self.conv_channels}")
        if self.kernel_size < 1 or self.kernel_size % 2 == 0:
            raise BackboneConfigError(f"kernel_size must be a positive odd number, got {self.kernel_size}")
        if self.pool_size < 1:
            raise BackboneConfigError(f"pool_size must be >= 1, got {self.pool_size}")
        if self.fc_output_dim != 1:
            raise BackboneConfigError("fc_output_dim must be 1 (one detector per attribute)")
        if self.activation not in ACTIVATIONS:
            raise BackboneConfigError(f"activation must be one of {ACTIVATIONS}, got {self.activation!r}")
        if self.dtype not in DTYPES:
            raise BackboneConfigError(f"dtype must be one of {tuple(DTYPES)}, got {self.dtype!r}")
        if self.seed < 0:
            raise BackboneConfigError(f"seed must be unsigned, got {self.seed}")
        if self.input_kind == 'image':
            self.spatial_sizes()

    def spatial_sizes(self) -> List[Tuple[int, int]]:
        """
        各プーリング段の後の空間サイズ

        Returns:
            [(H, W), ...] 段ごとのサイズ

        Raises:
            BackboneConfigError: いずれかの段でサイズが1未満になる
        """
        _, h, w = self.input_shape
        sizes = []
        for stage in range(1, len(self.conv_channels) + 1):
            h, w = h // self.pool_size, w // self.pool_size
            if h < 1 or w < 1:
                raise BackboneConfigError(
                    f"Pooling stage {stage} collapses spatial size to {h}x{w} "
                    f"(input {self.input_shape[1]}x{self.input_shape[2]}, pool {self.pool_size})"
                )
            sizes.append((h, w))
        return sizes

    @property
    def torch_dtype(self) -> torch.dtype:
        return DTYPES[self.dtype]

    def with_dtype(self, dtype: str) -> 'BackboneConfig':
        return BackboneConfig(**{**self.to_dict(), 'dtype': dtype})

    def to_dict(self) -> dict:
        return {
            'input_kind': self.input_kind,
            'input_shape': list(self.input_shape),
            'conv_channels': list(self.conv_channels),
            'kernel_size': self.kernel_size,
            'pool_size': self.pool_size,
            'use_batchnorm': self.use_batchnorm,
            'fc_output_dim': self.fc_output_dim,
            'activation': self.activation,
            'dtype': self.dtype,
            'seed': self.seed,
        }

    @classmethod
    def from_dict(cls, data: dict) -> 'BackboneConfig':
        return cls(**data)


@dataclass(frozen=True)
class ParameterSlot:
    """レイアウト内の1パラメータ（名前・オフセット・形状）"""
    name: str
    offset: int
    shape: Tuple[int, ...]

    @property
    def length(self) -> int:
        return int(math.prod(self.shape))


@dataclass(frozen=True)
class ParameterLayout:
    """パラメータ名から連続区間への対応表"""
    slots: Tuple[ParameterSlot, ...]
    config: Optional[BackboneConfig] = field(default=None, compare=False, repr=False)

    @classmethod
    def from_config(cls, config: BackboneConfig) -> 'ParameterLayout':
        shapes: List[Tuple[str, Tuple[int, ...]]] = []
        if config.input_kind == 'image':
            in_channels = config.input_shape[0]
            k = config.kernel_size
            for i, out_channels in enumerate(config.conv_channels, start=1):
                shapes.append((f'conv{i}.weight', (out_channels, in_channels, k, k)))
                shapes.append((f'conv{i}.bias', (out_channels,)))
                if config.use_batchnorm:
                    shapes.append((f'bn{i}.scale', (out_channels,)))
                    shapes.append((f'bn{i}.shift', (out_channels,)))
                in_channels = out_channels
            h, w = config.spatial_sizes()[-1]
            features = in_channels * h * w
        else:
            features = config.input_shape[0]
            for i, width in enumerate(config.conv_channels, start=1):
                shapes.append((f'hidden{i}.weight', (width, features)))
                shapes.append((f'hidden{i}.bias', (width,)))
                if config.use_batchnorm:
                    shapes.append((f'bn{i}.scale', (width,)))
                    shapes.append((f'bn{i}.shift', (width,)))
                features = width
        shapes.append(('fc.weight', (config.fc_output_dim, features)))
        shapes.append(('fc.bias', (config.fc_output_dim,)))
        return cls._pack(shapes, config)

    @classmethod
    def flat(cls, name: str, length: int) -> 'ParameterLayout':
        """バックボーンを持たない単一区間のレイアウト（解析的な目的関数用）"""
        return cls._pack([(name, (length,))], None)

    @classmethod
    def _pack(cls, shapes, config) -> 'ParameterLayout':
        slots = []
        offset = 0
        for name, shape in shapes:
            slot = ParameterSlot(name, offset, tuple(shape))
            slots.append(slot)
            offset += slot.length
        return cls(tuple(slots), config)

    @property
    def size(self) -> int:
        if not self.slots:
            return 0
        last = self.slots[-1]
        return last.offset + last.length

    @property
    def names(self) -> List[str]:
        return [s.name for s in self.slots]

    def slot(self, name: str) -> ParameterSlot:
        for s in self.slots:
            if s.name == name:
                return s
        raise KeyError(f"No parameter named {name!r} in layout")

    def describe(self) -> List[Tuple[str, int, int]]:
        """(name, offset, length) のリスト"""
        return [(s.name, s.offset, s.length) for s in self.slots]

    def unflatten(self, values: torch.Tensor) -> Dict[str, torch.Tensor]:
        """フラットなベクトルを名前付きのビューに分割（勾配グラフは保たれる）"""
        return {s.name: values[s.offset:s.offset + s.length].view(s.shape) for s in self.slots}

    def checksum(self) -> str:
        """レイアウト記述子の SHA-256"""
        text = ';'.join(f"{s.name}:{s.offset}:{'x'.join(map(str, s.shape))}" for s in self.slots)
        return hashlib.sha256(text.encode('utf-8')).hexdigest()


@dataclass(frozen=True, eq=False)
class ParameterVector:
    """全パラメータを順序付きで並べたベクトル（θ）"""
    values: torch.Tensor
    layout: ParameterLayout

    def __post_init__(self):
        values = self.values
        if not isinstance(values, torch.Tensor):
            values = torch.as_tensor(np.asarray(values))
        values = values.detach()
        if not values.is_floating_point():
            values = values.to(torch.float64)
        object.__setattr__(self, 'values', values)
        if values.dim() != 1 or values.numel() != self.layout.size:
            raise LayoutMismatchError(
                f"Parameter values of shape {tuple(values.shape)} do not match layout size {self.layout.size}"
            )
        if not bool(torch.isfinite(values).all()):
            raise ValueError("Parameter vector contains non-finite entries")

    def __len__(self) -> int:
        return self.values.numel()

    @property
    def dtype(self) -> torch.dtype:
        return self.values.dtype

    def check_layout(self, other: 'ParameterVector'):
        if other.layout != self.layout:
            raise LayoutMismatchError(
                f"Layout mismatch: {len(self.layout.slots)} slots / {self.layout.size} values "
                f"vs {len(other.layout.slots)} slots / {other.layout.size} values"
            )

    def with_values(self, values: torch.Tensor) -> 'ParameterVector':
        return ParameterVector(values, self.layout)

    def zeros_like(self) -> 'ParameterVector':
        return ParameterVector(torch.zeros_like(self.values), self.layout)

    def astype(self, dtype: Union[str, torch.dtype]) -> 'ParameterVector':
        if isinstance(dtype, str):
            dtype = DTYPES[dtype]
        return ParameterVector(self.values.to(dtype), self.layout)

    def __add__(self, other: 'ParameterVector') -> 'ParameterVector':
        self.check_layout(other)
        return self.with_values(self.values + other.values.to(self.dtype))

    def __sub__(self, other: 'ParameterVector') -> 'ParameterVector':
        self.check_layout(other)
        return self.with_values(self.values - other.values.to(self.dtype))

    def __mul__(self, scalar: float) -> 'ParameterVector':
        return self.with_values(self.values * float(scalar))

    __rmul__ = __mul__

    def __neg__(self) -> 'ParameterVector':
        return self.with_values(-self.values)

    def dot(self, other: 'ParameterVector') -> float:
        self.check_layout(other)
        return float(torch.dot(self.values, other.values.to(self.dtype)))

    def norm(self) -> float:
        return float(torch.linalg.vector_norm(self.values))

    def named(self) -> Dict[str, torch.Tensor]:
        return self.layout.unflatten(self.values)

    def numpy(self) -> np.ndarray:
        return self.values.cpu().numpy().copy()

    def equals(self, other: 'ParameterVector') -> bool:
        """レイアウト・dtype・値がビット単位で一致するか"""
        return (
            other.layout == self.layout
            and other.dtype == self.dtype
            and bool(torch.equal(self.values, other.values))
        )


@dataclass(frozen=True, eq=False)
class LabeledBatch:
    """ラベル付きの例のまとまり（ラベルは 0/1）"""
    inputs: np.ndarray
    labels: np.ndarray
    example_ids: Tuple[str, ...] = ()

    def __post_init__(self):
        inputs = np.asarray(self.inputs)
        labels = np.asarray(self.labels).astype(np.int64).reshape(-1)
        object.__setattr__(self, 'inputs', inputs)
        object.__setattr__(self, 'labels', labels)
        object.__setattr__(self, 'example_ids', tuple(self.example_ids))
        if inputs.ndim < 2 or len(inputs) == 0:
            raise ValueError(f"LabeledBatch needs a non-empty batch of examples, got inputs of shape {inputs.shape}")
        if len(labels) != len(inputs):
            raise ValueError(f"LabeledBatch has {len(inputs)} inputs but {len(labels)} labels")
        if not np.isin(labels, (0, 1)).all():
            raise ValueError("LabeledBatch labels must be 0 or 1")
        if self.example_ids and len(self.example_ids) != len(inputs):
            raise ValueError(f"LabeledBatch has {len(inputs)} inputs but {len(self.example_ids)} example ids")

    def __len__(self) -> int:
        return len(self.labels)

    @property
    def n_positive(self) -> int:
        return int(self.labels.sum())

    @property
    def n_negative(self) -> int:
        return len(self) - self.n_positive


def bce_loss(probs: Sequence[float], labels: Sequence[int]) -> float:
    """
    二値交差エントロピー（例平均）

    Args:
        probs: 陽性確率
        labels: 0/1 ラベル

    Returns:
        -mean(y log p + (1-y) log(1-p))、p は [ε, 1-ε] にクランプ
    """
    p = np.asarray(probs, dtype=np.float64).reshape(-1)
    y = np.asarray(labels, dtype=np.float64).reshape(-1)
    if len(p) != len(y):
        raise ValueError(f"bce_loss got {len(p)} probabilities but {len(y)} labels")
    if len(p) == 0:
        raise ValueError("bce_loss needs at least one example")
    eps = Config.PROB_EPSILON
    p = np.clip(p, eps, 1.0 - eps)
    return float(-np.mean(y * np.log(p) + (1.0 - y) * np.log1p(-p)))


def _bce_tensor(probs: torch.Tensor, labels: torch.Tensor) -> torch.Tensor:
    eps = Config.PROB_EPSILON
    p = probs.clamp(eps, 1.0 - eps)
    return -(labels * torch.log(p) + (1.0 - labels) * torch.log1p(-p)).mean()


class Backbone:
    """BackboneConfig に対応するネットワーク（状態を持たない）"""

    def __init__(self, config: BackboneConfig):
        self.config = config
        self.layout = ParameterLayout.from_config(config)
        self.dtype = config.torch_dtype
        logger.debug(f"Backbone built: {config.input_kind} {config.input_shape}, {self.layout.size} parameters")

    def init_params(self, seed: Optional[int] = None) -> ParameterVector:
        """
        パラメータを初期化

        重みは fan-in でスケールした平均0の正規分布、バイアスと
        batchnorm のシフトは0、スケールは1。
        """
        seed = self.config.seed if seed is None else int(seed)
        generator = torch.Generator().manual_seed(seed)
        gain = 2.0 if self.config.activation == 'relu' else 1.0

        chunks = []
        for slot in self.layout.slots:
            kind = slot.name.rsplit('.', 1)[1]
            if kind == 'weight':
                fan_in = int(math.prod(slot.shape[1:]))
                std = math.sqrt(gain / fan_in)
                chunk = torch.randn(slot.length, generator=generator, dtype=torch.float64) * std
            elif kind == 'scale':
                chunk = torch.ones(slot.length, dtype=torch.float64)
            else:
                chunk = torch.zeros(slot.length, dtype=torch.float64)
            chunks.append(chunk)

        return ParameterVector(torch.cat(chunks).to(self.dtype), self.layout)

    def check_params(self, params: ParameterVector):
        if params.layout != self.layout:
            raise LayoutMismatchError(
                f"Parameters with {params.layout.size} values do not match backbone layout of {self.layout.size}"
            )

    def inputs_tensor(self, batch: LabeledBatch) -> torch.Tensor:
        expected = self.config.input_shape
        received = tuple(batch.inputs.shape[1:])
        if received != expected:
            raise ShapeMismatchError(f"Expected example shape {expected}, received {received}")
        return torch.as_tensor(batch.inputs, dtype=self.dtype)

    def logits(self, values: torch.Tensor, inputs: torch.Tensor) -> torch.Tensor:
        """ロジット（values は勾配グラフを保持したままでよい）"""
        named = self.layout.unflatten(values)
        cfg = self.config
        x = inputs

        if cfg.input_kind == 'image':
            for i in range(1, len(cfg.conv_channels) + 1):
                x = F.conv2d(x, named[f'conv{i}.weight'], named[f'conv{i}.bias'], padding=cfg.kernel_size // 2)
                if cfg.use_batchnorm:
                    x = self._batch_norm(x, named[f'bn{i}.scale'], named[f'bn{i}.shift'], dims=(0, 2, 3))
                x = self._activate(x)
                x = F.max_pool2d(x, cfg.pool_size)
            x = x.flatten(1)
        else:
            for i in range(1, len(cfg.conv_channels) + 1):
                x = F.linear(x, named[f'hidden{i}.weight'], named[f'hidden{i}.bias'])
                if cfg.use_batchnorm:
                    x = self._batch_norm(x, named[f'bn{i}.scale'], named[f'bn{i}.shift'], dims=(0,))
                x = self._activate(x)

        return F.linear(x, named['fc.weight'], named['fc.bias']).squeeze(-1)

    def _activate(self, x: torch.Tensor) -> torch.Tensor:
        if self.config.activation == 'relu':
            return torch.relu(x)
        return torch.tanh(x)

    @staticmethod
    def _batch_norm(x: torch.Tensor, scale: torch.Tensor, shift: torch.Tensor, dims: Tuple[int, ...]) -> torch.Tensor:
        # 常に現在のバッチの統計量を使う（タスクをまたぐ移動平均は持たない）
        mean = x.mean(dim=dims, keepdim=True)
        var = x.var(dim=dims, unbiased=False, keepdim=True)
        x_hat = (x - mean) / torch.sqrt(var + Config.BATCHNORM_EPSILON)
        shape = (1, -1) + (1,) * (x.dim() - 2)
        return x_hat * scale.view(shape) + shift.view(shape)

    def _loss_tensor(self, values: torch.Tensor, batch: LabeledBatch) -> torch.Tensor:
        x = self.inputs_tensor(batch)
        y = torch.as_tensor(batch.labels, dtype=self.dtype)
        return _bce_tensor(torch.sigmoid(self.logits(values, x)), y)

    def forward(self, params: ParameterVector, batch: LabeledBatch, mode: str = 'train') -> np.ndarray:
        """
        各例の陽性確率

        Args:
            params: パラメータ
            batch: 入力バッチ
            mode: 'train' または 'eval'（どちらもバッチ統計量を使用）

        Returns:
            (0, 1) 内の確率の配列
        """
        if mode not in MODES:
            raise ValueError(f"mode must be one of {MODES}, got {mode!r}")
        self.check_params(params)
        with torch.no_grad():
            x = self.inputs_tensor(batch)
            probs = torch.sigmoid(self.logits(params.values.to(self.dtype), x))
            eps = Config.PROB_EPSILON
            probs = probs.clamp(eps, 1.0 - eps)
        return probs.cpu().numpy()

    def loss(self, params: ParameterVector, batch: LabeledBatch) -> float:
        self.check_params(params)
        with torch.no_grad():
            return float(self._loss_tensor(params.values.to(self.dtype), batch))

    def value_and_grad(self, params: ParameterVector, batch: LabeledBatch) -> Tuple[float, ParameterVector]:
        """損失値と勾配 ∇θ L を同時に評価"""
        self.check_params(params)
        values = params.values.detach().to(self.dtype).clone().requires_grad_(True)
        loss = self._loss_tensor(values, batch)
        (grad,) = torch.autograd.grad(loss, values, allow_unused=True)
        if grad is None:
            grad = torch.zeros_like(values)
        return float(loss.detach()), ParameterVector(grad, self.layout)

    def loss_grad(self, params: ParameterVector, batch: LabeledBatch) -> ParameterVector:
        return self.value_and_grad(params, batch)[1]

    def hessian_vector_product(self, params: ParameterVector, batch: LabeledBatch,
                               v: ParameterVector) -> ParameterVector:
        """
        ヘッセ行列とベクトルの積 H·v（二重逆伝播による厳密値）
        """
        self.check_params(params)
        params.check_layout(v)
        values = params.values.detach().to(self.dtype).clone().requires_grad_(True)
        loss = self._loss_tensor(values, batch)
        (grad,) = torch.autograd.grad(loss, values, create_graph=True, allow_unused=True)
        if grad is None or not grad.requires_grad:
            return ParameterVector(torch.zeros_like(values.detach()), self.layout)

        grad_dot_v = torch.dot(grad, v.values.detach().to(self.dtype))
        (hv,) = torch.autograd.grad(grad_dot_v, values, allow_unused=True)
        if hv is None:
            hv = torch.zeros_like(values)
        return ParameterVector(hv.detach(), self.layout)


@lru_cache(maxsize=32)
def get_backbone(config: BackboneConfig) -> Backbone:
    """設定ごとに Backbone を共有（Backbone は状態を持たない）"""
    return Backbone(config)


def _backbone_of(params: ParameterVector) -> Backbone:
    if params.layout.config is None:
        raise LayoutMismatchError("Parameter vector carries no backbone configuration")
    return get_backbone(params.layout.config)


def init_params(config: BackboneConfig, seed: Optional[int] = None) -> ParameterVector:
    return get_backbone(config).init_params(seed)


def forward(params: ParameterVector, batch: LabeledBatch, mode: str = 'train') -> np.ndarray:
    return _backbone_of(params).forward(params, batch, mode)


def loss(params: ParameterVector, batch: LabeledBatch) -> float:
    return _backbone_of(params).loss(params, batch)


def loss_grad(params: ParameterVector, batch: LabeledBatch) -> ParameterVector:
    return _backbone_of(params).loss_grad(params, batch)


def hessian_vector_product(params: ParameterVector, batch: LabeledBatch, v: ParameterVector) -> ParameterVector:
    return _backbone_of(params).hessian_vector_product(params, batch, v)


def value_and_grad(params: ParameterVector, batch: LabeledBatch) -> Tuple[float, ParameterVector]:
    return _backbone_of(params).value_and_grad(params, batch)
