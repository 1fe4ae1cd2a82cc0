"""Full dual-branch model: extractor, graph branches, region pooling, head.

The architecture is assembled per variant: the common branch uses one learned
adjacency shared by all inputs, the individualized branch builds an adjacency
per input, and region pooling can be attached to either branch. Ablation
variants a..e plus the default "full" arrangement (pooling on the
individualized branch only) control which parameter groups exist.
"""

from __future__ import annotations

import json
import os
import struct
from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .extractor import ExtractorParams, extract_features, glorot, init_extractor
from .gcn import gcn_propagate, init_gcn_stack
from .graphs import common_adjacency, individual_adjacency, init_common_adjacency_raw, normalize_adjacency
from .pooling import PoolingParams, assignment_matrix, init_pooling, merge, pool, region_conv, unpool
from .rng import substream

N_CLASSES = 2

VARIANTS = ("a", "b", "c", "d", "e", "full")

# which structural pieces each variant trains
_VARIANT_LAYOUT = {
    "a": {"common": True, "inst": False, "pool_inst": False, "pool_common": False},
    "b": {"common": False, "inst": True, "pool_inst": False, "pool_common": False},
    "c": {"common": True, "inst": True, "pool_inst": False, "pool_common": False},
    "d": {"common": True, "inst": True, "pool_inst": False, "pool_common": True},
    "e": {"common": True, "inst": True, "pool_inst": True, "pool_common": True},
    "full": {"common": True, "inst": True, "pool_inst": True, "pool_common": False},
}


def default_extractor_layers(feature_dim: int):
    return ((7, 4, 1, 16), (5, 2, 16, feature_dim))


@dataclass(frozen=True)
class ModelConfig:
    n_channels: int = 19
    feature_dim: int = 32  # per-electrode features out of the extractor
    proj_dim: int = 16  # width of the bilinear similarity projections
    out_dim: int = 16  # per-branch graph convolution output width
    steps: int = 2  # propagation steps L in each branch
    region_steps: int = 1  # propagation steps L' at region level
    n_regions: int = 5
    variant: str = "full"
    classifier_hidden: int = 0  # 0 = linear head
    inst_softmax_axis: str = "col"  # adjacency normalization axis ("col" or "row")
    extractor_layers: tuple = None  # defaults derived from feature_dim

    def __post_init__(self):
        if self.variant not in VARIANTS:
            raise ValueError(f"unknown variant {self.variant!r}; expected one of {VARIANTS}")
        if min(self.n_channels, self.feature_dim, self.proj_dim, self.out_dim) < 1:
            raise ValueError("n_channels, feature_dim, proj_dim, out_dim must be positive")
        if self.steps < 0 or self.region_steps < 0:
            raise ValueError("steps and region_steps must be >= 0")
        if self.classifier_hidden < 0:
            raise ValueError("classifier_hidden must be >= 0")
        if self.n_regions < 1 or self.n_regions > self.n_channels:
            raise ValueError(f"n_regions must be in [1, n_channels], got {self.n_regions}")
        layers = self.extractor_layers
        if layers is None:
            layers = default_extractor_layers(self.feature_dim)
        layers = tuple(tuple(int(v) for v in spec) for spec in layers)
        if layers[-1][3] != self.feature_dim:
            raise ValueError(
                f"last extractor layer emits {layers[-1][3]} channels, expected feature_dim={self.feature_dim}"
            )
        object.__setattr__(self, "extractor_layers", layers)

    @property
    def layout(self) -> dict:
        return _VARIANT_LAYOUT[self.variant]

    @property
    def head_input_dim(self) -> int:
        return 2 * self.out_dim if (self.layout["common"] and self.layout["inst"]) else self.out_dim

    def to_dict(self) -> dict:
        return {
            "n_channels": self.n_channels,
            "feature_dim": self.feature_dim,
            "proj_dim": self.proj_dim,
            "out_dim": self.out_dim,
            "steps": self.steps,
            "region_steps": self.region_steps,
            "n_regions": self.n_regions,
            "variant": self.variant,
            "classifier_hidden": self.classifier_hidden,
            "inst_softmax_axis": self.inst_softmax_axis,
            "extractor_layers": [list(s) for s in self.extractor_layers],
        }

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        d = dict(d)
        if d.get("extractor_layers") is not None:
            d["extractor_layers"] = tuple(tuple(s) for s in d["extractor_layers"])
        return cls(**d)


@dataclass
class ModelParams:
    extractor: ExtractorParams
    head_w: ad.Node
    head_b: ad.Node
    common_adj_raw: ad.Node = None
    inst_w1: ad.Node = None
    inst_w2: ad.Node = None
    common_weights: list = None
    inst_weights: list = None
    pool_inst: PoolingParams = None
    pool_common: PoolingParams = None
    hidden_w: ad.Node = None
    hidden_b: ad.Node = None

    def named_tensors(self) -> list:
        """Deterministically ordered (name, node) pairs over present groups."""
        out = []
        for i, (_spec, w, b) in enumerate(self.extractor.layers):
            out.append((f"extractor.{i}.w", w))
            out.append((f"extractor.{i}.b", b))
        if self.common_adj_raw is not None:
            out.append(("common_adj.raw", self.common_adj_raw))
            for l, w in enumerate(self.common_weights):
                out.append((f"cgnn.{l}", w))
        if self.inst_w1 is not None:
            out.append(("inst_adj.w1", self.inst_w1))
            out.append(("inst_adj.w2", self.inst_w2))
            for l, w in enumerate(self.inst_weights):
                out.append((f"ignn.{l}", w))
        for tag, pooling in (("pool_inst", self.pool_inst), ("pool_common", self.pool_common)):
            if pooling is not None:
                out.append((f"{tag}.proj", pooling.assign_proj))
                for l, w in enumerate(pooling.region_weights):
                    out.append((f"{tag}.region.{l}", w))
        if self.hidden_w is not None:
            out.append(("head.hidden_w", self.hidden_w))
            out.append(("head.hidden_b", self.hidden_b))
        out.append(("head.w", self.head_w))
        out.append(("head.b", self.head_b))
        return out

    def tensors(self) -> list:
        return [node for _name, node in self.named_tensors()]

    def group_of(self, name: str) -> str:
        return name.split(".")[0]


def build_variant(config: ModelConfig) -> dict:
    """Manifest of the parameter groups a variant trains, plus head width."""
    layout = config.layout
    groups = ["extractor"]
    if layout["common"]:
        groups += ["common_adj", "cgnn"]
    if layout["inst"]:
        groups += ["inst_adj", "ignn"]
    if layout["pool_inst"]:
        groups.append("pool_inst")
    if layout["pool_common"]:
        groups.append("pool_common")
    groups.append("head")
    return {
        "variant": config.variant,
        "head_input_dim": config.head_input_dim,
        "groups": tuple(groups),
    }


def init_model(config: ModelConfig, seed: int) -> ModelParams:
    """Fresh parameters for the configured variant, from named seed streams."""
    layout = config.layout
    extractor = init_extractor(substream(seed, "init", "extractor"), config.extractor_layers)

    common_raw = common_w = None
    if layout["common"]:
        common_raw = init_common_adjacency_raw(substream(seed, "init", "common_adj"), config.n_channels)
        common_w = init_gcn_stack(
            substream(seed, "init", "cgnn"), config.steps, config.feature_dim, config.out_dim
        )
    inst_w1 = inst_w2 = inst_w = None
    if layout["inst"]:
        gen = substream(seed, "init", "inst_adj")
        inst_w1 = ad.param(glorot(gen, (config.feature_dim, config.proj_dim), config.feature_dim, config.proj_dim))
        inst_w2 = ad.param(glorot(gen, (config.feature_dim, config.proj_dim), config.feature_dim, config.proj_dim))
        inst_w = init_gcn_stack(
            substream(seed, "init", "ignn"), config.steps, config.feature_dim, config.out_dim
        )
    pool_inst = pool_common = None
    if layout["pool_inst"]:
        pool_inst = init_pooling(
            substream(seed, "init", "pool_inst"),
            config.feature_dim, config.n_regions, config.region_steps, config.out_dim,
        )
    if layout["pool_common"]:
        pool_common = init_pooling(
            substream(seed, "init", "pool_common"),
            config.feature_dim, config.n_regions, config.region_steps, config.out_dim,
        )

    width = config.head_input_dim
    gen = substream(seed, "init", "head")
    hidden_w = hidden_b = None
    if config.classifier_hidden > 0:
        hidden_w = ad.param(glorot(gen, (width, config.classifier_hidden), width, config.classifier_hidden))
        hidden_b = ad.param(np.zeros(config.classifier_hidden))
        width = config.classifier_hidden
    head_w = ad.param(glorot(gen, (width, N_CLASSES), width, N_CLASSES))
    head_b = ad.param(np.zeros(N_CLASSES))

    return ModelParams(
        extractor=extractor,
        head_w=head_w,
        head_b=head_b,
        common_adj_raw=common_raw,
        inst_w1=inst_w1,
        inst_w2=inst_w2,
        common_weights=common_w,
        inst_weights=inst_w,
        pool_inst=pool_inst,
        pool_common=pool_common,
        hidden_w=hidden_w,
        hidden_b=hidden_b,
    )


def bind_params(config: ModelConfig, nodes: list) -> ModelParams:
    """Assemble a ModelParams whose tensors ARE the given nodes.

    Nodes must match `named_tensors()` order and shapes for the config; used
    by gradient checking, which supplies its own leaf nodes.
    """
    template = init_model(config, seed=0)
    named = template.named_tensors()
    if len(nodes) != len(named):
        raise ValueError(f"expected {len(named)} tensors, got {len(nodes)}")
    lookup = {}
    for (name, t_node), node in zip(named, nodes):
        if tuple(node.value.shape) != tuple(t_node.value.shape):
            raise ValueError(f"tensor {name}: shape {node.value.shape} != {t_node.value.shape}")
        lookup[name] = node

    extractor = ExtractorParams(
        [
            (spec, lookup[f"extractor.{i}.w"], lookup[f"extractor.{i}.b"])
            for i, (spec, _w, _b) in enumerate(template.extractor.layers)
        ]
    )

    def stack(prefix, source):
        return None if source is None else [lookup[f"{prefix}.{l}"] for l in range(len(source))]

    def pooling(tag, source):
        if source is None:
            return None
        return PoolingParams(
            lookup[f"{tag}.proj"],
            [lookup[f"{tag}.region.{l}"] for l in range(len(source.region_weights))],
        )

    return ModelParams(
        extractor=extractor,
        head_w=lookup["head.w"],
        head_b=lookup["head.b"],
        common_adj_raw=lookup.get("common_adj.raw"),
        inst_w1=lookup.get("inst_adj.w1"),
        inst_w2=lookup.get("inst_adj.w2"),
        common_weights=stack("cgnn", template.common_weights),
        inst_weights=stack("ignn", template.inst_weights),
        pool_inst=pooling("pool_inst", template.pool_inst),
        pool_common=pooling("pool_common", template.pool_common),
        hidden_w=lookup.get("head.hidden_w"),
        hidden_b=lookup.get("head.hidden_b"),
    )


def _head(y_all: ad.Node, params: ModelParams) -> ad.Node:
    """relu, mean over the channel axis, linear stack, softmax."""
    h = ad.mean(ad.relu(y_all), axis=-2)
    if params.hidden_w is not None:
        h = ad.relu(ad.bias_add(ad.matmul(h, params.hidden_w), params.hidden_b))
    logits = ad.bias_add(ad.matmul(h, params.head_w), params.head_b)
    return ad.softmax(logits, axis=-1)


def forward_batch(segments: np.ndarray, params: ModelParams, config: ModelConfig):
    """Run the model on a (B, N, T_s) stack of segments.

    Returns (probs node of shape (B, C), diagnostics dict with graph nodes:
    "adj_inst" when the individualized branch exists and "assign" as the
    list of assignment matrices, individualized branch first).
    """
    segments = np.asarray(segments, dtype=np.float64)
    if segments.ndim != 3 or segments.shape[1] != config.n_channels:
        raise ValueError(
            f"expected segments shaped (B, {config.n_channels}, T), got {segments.shape}"
        )
    layout = config.layout
    feats = extract_features(segments, params.extractor)  # (B, N, F_d)

    diag = {"adj_inst": None, "assign": []}
    y_common = y_inst = None
    adj_common = adj_common_hat = adj_inst = adj_inst_hat = None
    if layout["common"]:
        adj_common = common_adjacency(params.common_adj_raw)
        adj_common_hat = normalize_adjacency(adj_common)
        y_common = gcn_propagate(adj_common_hat, feats, params.common_weights)
    if layout["inst"]:
        adj_inst = individual_adjacency(feats, params.inst_w1, params.inst_w2, config.inst_softmax_axis)
        adj_inst_hat = normalize_adjacency(adj_inst)
        y_inst = gcn_propagate(adj_inst_hat, feats, params.inst_weights)
        diag["adj_inst"] = adj_inst

    up_inst = up_common = None
    if layout["pool_inst"]:
        assign = assignment_matrix(adj_inst_hat, feats, params.pool_inst)
        adj_r, feats_r = pool(assign, adj_inst, feats)
        up_inst = unpool(assign, region_conv(adj_r, feats_r, params.pool_inst))
        diag["assign"].append(assign)
    if layout["pool_common"]:
        assign = assignment_matrix(adj_common_hat, feats, params.pool_common)
        adj_r, feats_r = pool(assign, adj_common, feats)
        up_common = unpool(assign, region_conv(adj_r, feats_r, params.pool_common))
        diag["assign"].append(assign)

    if config.variant == "a":
        y_all = y_common
    elif config.variant == "b":
        y_all = y_inst
    elif config.variant == "full":
        y_all = merge(y_inst, up_inst, y_common)
    else:  # c, d, e
        if up_inst is not None:
            y_inst = ad.add(y_inst, up_inst)
        if up_common is not None:
            y_common = ad.add(y_common, up_common)
        y_all = ad.concat([y_inst, y_common], axis=-1)

    return _head(y_all, params), diag


def forward(segment: np.ndarray, params: ModelParams, config: ModelConfig):
    """Single-segment forward: (N, T_s) -> (class probs (C,), diagnostics arrays)."""
    segment = np.asarray(segment, dtype=np.float64)
    if segment.ndim != 2:
        raise ValueError(f"expected one (N, T) segment, got shape {segment.shape}")
    probs, diag = forward_batch(segment[None], params, config)
    out_diag = {
        "adj_inst": None if diag["adj_inst"] is None else diag["adj_inst"].value[0],
        "assign": [a.value[0] for a in diag["assign"]],
    }
    return probs.value[0], out_diag


# ---------------------------------------------------------------------------
# parameter file format (documented in README): little-endian throughout,
#   magic "HGNP" | u32 version | u64 header length | header JSON | payload
# header JSON = {"config": ..., "tensors": [{"name", "shape", "offset"}, ...]}
# payload = concatenated row-major float64 tensor data.
# ---------------------------------------------------------------------------

MAGIC = b"HGNP"
FORMAT_VERSION = 1


class ParamsFileError(ValueError):
    """Base class for parameter-file problems."""


class ParamsCorruptError(ParamsFileError):
    """File is not a parameter file or is truncated/damaged."""


class ParamsVersionError(ParamsFileError):
    """File uses an unsupported format version."""


class ParamsShapeError(ParamsFileError):
    """Tensor table disagrees with the embedded model config."""


class ParamsConfigMismatchError(ParamsFileError):
    """Embedded config conflicts with the config expected at load time."""


def _expected_shapes(config: ModelConfig) -> dict:
    structural = init_model(config, seed=0)
    return {name: node.value.shape for name, node in structural.named_tensors()}


def save_params(path: str, params: ModelParams, config: ModelConfig) -> None:
    """Atomically write params + config; round-trips bit-exactly."""
    named = params.named_tensors()
    table = []
    offset = 0
    chunks = []
    for name, node in named:
        arr = np.ascontiguousarray(node.value, dtype="<f8")
        table.append({"name": name, "shape": list(arr.shape), "offset": offset})
        chunks.append(arr.tobytes())
        offset += arr.nbytes
    header = json.dumps({"config": config.to_dict(), "tensors": table}).encode("utf-8")
    blob = MAGIC + struct.pack("<I", FORMAT_VERSION) + struct.pack("<Q", len(header)) + header
    tmp = f"{path}.tmp"
    with open(tmp, "wb") as fh:
        fh.write(blob)
        for chunk in chunks:
            fh.write(chunk)
    os.replace(tmp, path)


def load_params(path: str, expected_config: ModelConfig = None):
    """Read a parameter file; returns (ModelParams, ModelConfig).

    Raises ParamsVersionError / ParamsShapeError / ParamsCorruptError /
    ParamsConfigMismatchError as distinct failures; never returns partially
    loaded state.
    """
    with open(path, "rb") as fh:
        data = fh.read()
    if len(data) < len(MAGIC) + 12 or data[: len(MAGIC)] != MAGIC:
        raise ParamsCorruptError(f"{path}: not a parameter file")
    pos = len(MAGIC)
    (version,) = struct.unpack_from("<I", data, pos)
    pos += 4
    if version != FORMAT_VERSION:
        raise ParamsVersionError(f"{path}: format version {version}, expected {FORMAT_VERSION}")
    (header_len,) = struct.unpack_from("<Q", data, pos)
    pos += 8
    if len(data) < pos + header_len:
        raise ParamsCorruptError(f"{path}: truncated header")
    try:
        header = json.loads(data[pos : pos + header_len].decode("utf-8"))
        config = ModelConfig.from_dict(header["config"])
        table = header["tensors"]
    except (ValueError, KeyError, TypeError) as exc:
        raise ParamsCorruptError(f"{path}: unreadable header ({exc})") from None
    pos += header_len

    expected = _expected_shapes(config)
    if [t["name"] for t in table] != list(expected):
        raise ParamsShapeError(f"{path}: tensor names disagree with embedded config")
    loaded = {}
    for entry in table:
        shape = tuple(entry["shape"])
        if shape != expected[entry["name"]]:
            raise ParamsShapeError(
                f"{path}: tensor {entry['name']} has shape {shape}, config implies {expected[entry['name']]}"
            )
        start = pos + entry["offset"]
        nbytes = 8 * int(np.prod(shape)) if shape else 8
        if start + nbytes > len(data):
            raise ParamsCorruptError(f"{path}: truncated payload at tensor {entry['name']}")
        arr = np.frombuffer(data[start : start + nbytes], dtype="<f8").reshape(shape)
        loaded[entry["name"]] = ad.param(arr.copy())

    if expected_config is not None and expected_config.to_dict() != config.to_dict():
        raise ParamsConfigMismatchError(
            f"{path}: embedded config does not match the runtime config"
        )

    params = init_model(config, seed=0)
    for name, node in params.named_tensors():
        node.value = loaded[name].value
        node.grad = None
    return params, config
