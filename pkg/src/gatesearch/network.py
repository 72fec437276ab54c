"""Searchable convolutional networks.

A searchable layer averages several gated candidate operations (conv ->
norm -> activation); operations that differ only in activation share one
conv+norm stem. The module also provides the two backbone presets, optional
skip connections with 1x1 input reducers, and compilation of gate decisions
into a pruned standalone network.
"""

from __future__ import annotations

import numpy as np

from . import ops
from .errors import ConfigError, DeadLayerError, DimensionError, WiringError
from .gating import GRAD_VARIANTS, GateVector, mask_channels
from .resources import CostTerm, phi_flops, phi_params
from .tensor import Tensor, no_grad

__all__ = [
    "OperationSpec", "Stem", "Operation", "Reducer", "SearchableLayer",
    "MaxPool", "GlobalAvgPool", "Flatten", "Linear", "SearchableNetwork",
    "build_network", "compile_network", "finetune_mode", "recalibrate_bn",
    "CompiledArchitecture", "CompiledLayer", "CompiledOp",
    "KERNEL_CHOICES", "ACTIVATION_CHOICES", "CONV_TYPE_CHOICES", "BACKBONES",
]

KERNEL_CHOICES = (1, 3, 5, 7, 9, 11)
ACTIVATION_CHOICES = ("relu", "prelu", "tanh", "none")
CONV_TYPE_CHOICES = ("normal", "depthwise")
NORM_CHOICES = ("bn", "none")
BACKBONES = ("plain-cnn", "vgg16-cifar")

BN_EPS = 1e-5
BN_MOMENTUM = 0.1


class OperationSpec:
    """One candidate operation: conv type, kernel, normalization, activation."""

    def __init__(self, conv_type, kernel, norm="bn", activation="relu", stride=1):
        if conv_type not in CONV_TYPE_CHOICES:
            raise ConfigError(f"conv_type must be one of {CONV_TYPE_CHOICES}, got {conv_type!r}")
        if kernel not in KERNEL_CHOICES:
            raise ConfigError(f"kernel must be one of 1,3,5,7,9,11, got {kernel!r}")
        if norm not in NORM_CHOICES:
            raise ConfigError(f"norm must be one of {NORM_CHOICES}, got {norm!r}")
        if activation not in ACTIVATION_CHOICES:
            raise ConfigError(f"activation must be one of {ACTIVATION_CHOICES}, got {activation!r}")
        if stride < 1:
            raise ConfigError(f"stride must be >= 1, got {stride}")
        self.conv_type = conv_type
        self.kernel = kernel
        self.norm = norm
        self.activation = activation
        self.stride = stride

    def stem_key(self):
        return (self.conv_type, self.kernel, self.norm, self.stride)

    def __eq__(self, other):
        return isinstance(other, OperationSpec) and self.__dict__ == other.__dict__

    def __repr__(self):
        return (f"OperationSpec({self.conv_type}, k={self.kernel}, "
                f"{self.norm}, {self.activation}, stride={self.stride})")


class Stem:
    """Shared conv (+ optional batch norm) feeding one or more activations."""

    def __init__(self, conv_type, kernel, in_channels, out_channels, stride, norm, rng, name=""):
        if conv_type == "depthwise" and in_channels != out_channels:
            raise ConfigError(
                f"depthwise stem requires equal channel counts, got {in_channels}->{out_channels}")
        self.conv_type = conv_type
        self.kernel = kernel
        self.stride = stride
        self.norm = norm
        self.in_channels = in_channels
        self.out_channels = out_channels
        self.groups = in_channels if conv_type == "depthwise" else 1
        fan_in = (in_channels // self.groups) * kernel * kernel
        wshape = (out_channels, in_channels // self.groups, kernel, kernel)
        self.weight = Tensor.param(ops.kaiming_uniform(rng, wshape, fan_in), f"{name}.weight")
        self.bias = Tensor.param(np.zeros(out_channels), f"{name}.bias")
        if norm == "bn":
            self.bn_gamma = Tensor.param(np.ones(out_channels), f"{name}.bn_gamma")
            self.bn_beta = Tensor.param(np.zeros(out_channels), f"{name}.bn_beta")
            self.running_mean = np.zeros(out_channels, dtype=np.float32)
            self.running_var = np.ones(out_channels, dtype=np.float32)

    def forward(self, x, training):
        y = ops.conv2d(x, self.weight, self.bias, stride=self.stride,
                       padding=self.kernel // 2, groups=self.groups)
        if self.norm == "bn":
            y = ops.batch_norm(y, self.bn_gamma, self.bn_beta, self.running_mean,
                               self.running_var, training, BN_MOMENTUM, BN_EPS)
        return y

    def named_params(self, prefix):
        out = [(f"{prefix}.weight", self.weight), (f"{prefix}.bias", self.bias)]
        if self.norm == "bn":
            out += [(f"{prefix}.bn_gamma", self.bn_gamma), (f"{prefix}.bn_beta", self.bn_beta)]
        return out

    def named_buffers(self, prefix):
        if self.norm == "bn":
            return [(f"{prefix}.running_mean", self.running_mean),
                    (f"{prefix}.running_var", self.running_var)]
        return []


class Operation:
    """A stem reference plus this operation's activation (and its parameters)."""

    def __init__(self, spec, stem_index, out_channels, name=""):
        self.spec = spec
        self.stem_index = stem_index
        self.prelu = None
        if spec.activation == "prelu":
            self.prelu = Tensor.param(np.full(out_channels, 0.25), f"{name}.prelu")

    def apply_activation(self, y):
        act = self.spec.activation
        if act == "relu":
            return ops.relu(y)
        if act == "prelu":
            return ops.prelu(y, self.prelu)
        if act == "tanh":
            return ops.tanh(y)
        return y


class Reducer:
    """Fixed 1x1 convolution compressing the input after an identity connection."""

    def __init__(self, in_channels, out_channels, rng, name=""):
        self.in_channels = in_channels
        self.out_channels = out_channels
        self.weight = Tensor.param(
            ops.kaiming_uniform(rng, (out_channels, in_channels, 1, 1), in_channels),
            f"{name}.weight")
        self.bias = Tensor.param(np.zeros(out_channels), f"{name}.bias")

    def forward(self, x):
        return ops.conv2d(x, self.weight, self.bias, stride=1, padding=0, groups=1)


class SearchableLayer:
    """One layer averaging M gated candidate operations (fixed divisor M).

    Operations sharing a (conv type, kernel) stem reuse the same conv+norm
    parameters at storage level. ``skip_source`` names an earlier searchable
    layer whose output is added to this layer's averaged output.
    """

    def __init__(self, index, in_channels, out_channels, op_specs, rng,
                 skip_source=None, reducer_channels=None, grad_variant="binary"):
        if not op_specs:
            raise ConfigError(f"layer {index}: empty candidate operation set")
        if grad_variant not in GRAD_VARIANTS:
            raise ConfigError(f"grad_variant must be one of {GRAD_VARIANTS}, got {grad_variant!r}")
        strides = {s.stride for s in op_specs}
        if len(strides) > 1:
            raise ConfigError(f"layer {index}: all operations must share one stride, got {sorted(strides)}")
        self.index = index
        self.in_channels = in_channels
        self.out_channels = out_channels
        self.stride = op_specs[0].stride
        self.skip_source = skip_source
        self.grad_variant = grad_variant
        self.reducer = None
        stem_in = in_channels
        if reducer_channels is not None:
            self.reducer = Reducer(in_channels, reducer_channels, rng, f"layer{index}.reducer")
            stem_in = reducer_channels
        self.stem_in_channels = stem_in

        self.stems = []
        stem_by_key = {}
        self.operations = []
        for spec in op_specs:
            key = spec.stem_key()
            if key not in stem_by_key:
                stem_by_key[key] = len(self.stems)
                self.stems.append(Stem(spec.conv_type, spec.kernel, stem_in, out_channels,
                                       spec.stride, spec.norm, rng,
                                       f"layer{index}.stem{len(self.stems)}"))
            self.operations.append(Operation(spec, stem_by_key[key], out_channels,
                                             f"layer{index}.op{len(self.operations)}"))
        self.gates = [GateVector(out_channels, owner=(index, i))
                      for i in range(len(self.operations))]
        self.h_in = self.w_in = self.h_out = self.w_out = None

    @property
    def num_operations(self):
        return len(self.operations)

    @property
    def search_space_size(self):
        """Number of distinct gate patterns: 2^(M * C)."""
        return 2 ** (self.num_operations * self.out_channels)

    def set_geometry(self, h_in, w_in):
        self.h_in, self.w_in = h_in, w_in
        # padding k//2 makes the output size kernel-independent
        self.h_out = (h_in - 1) // self.stride + 1
        self.w_out = (w_in - 1) // self.stride + 1

    def forward(self, x, x_skip=None, training=True):
        if x.data.shape[1] != self.in_channels:
            raise ConfigError(
                f"layer {self.index}: expected {self.in_channels} input channels, got {x.data.shape[1]}")
        if (x_skip is not None) != (self.skip_source is not None):
            raise ConfigError(
                f"layer {self.index}: skip tensor presence does not match skip_source")
        x_in = self.reducer.forward(x) if self.reducer is not None else x
        stem_out = [stem.forward(x_in, training) for stem in self.stems]
        masked = []
        for op, vec in zip(self.operations, self.gates):
            y = op.apply_activation(stem_out[op.stem_index])
            masked.append(mask_channels(y, vec, self.grad_variant))
        out = ops.scale(ops.add_n(masked), 1.0 / self.num_operations)
        if x_skip is not None:
            if x_skip.data.shape[1] != self.out_channels:
                raise ConfigError(
                    f"layer {self.index}: skip provides {x_skip.data.shape[1]} channels, "
                    f"layer emits {self.out_channels}")
            out = ops.add(out, x_skip)
        return out

    def union_decisions(self) -> np.ndarray:
        union = np.zeros(self.out_channels, dtype=bool)
        for v in self.gates:
            union |= v.psi_on > v.psi_off
        return union

    def op_cost_terms(self):
        terms = []
        for i, op in enumerate(self.operations):
            spec = op.spec
            terms.append(CostTerm(
                layer=self.index, op=f"op{i}", kind=spec.conv_type, kernel=spec.kernel,
                stride=spec.stride, h_in=self.h_in, w_in=self.w_in,
                h_out=self.h_out, w_out=self.w_out,
                groups=self.stem_in_channels if spec.conv_type == "depthwise" else 1,
                bias=True, norm_params=2 if spec.norm == "bn" else 0,
                act_params=1 if spec.activation == "prelu" else 0))
        return terms

    def reducer_cost_term(self):
        if self.reducer is None:
            return None
        return CostTerm(layer=self.index, op="reducer", kind="normal", kernel=1, stride=1,
                        h_in=self.h_in, w_in=self.w_in, h_out=self.h_in, w_out=self.w_in,
                        groups=1, bias=True, norm_params=0, act_params=0)

    def named_params(self):
        out = []
        if self.reducer is not None:
            out += [(f"layer{self.index}.reducer.weight", self.reducer.weight),
                    (f"layer{self.index}.reducer.bias", self.reducer.bias)]
        for si, stem in enumerate(self.stems):
            out += stem.named_params(f"layer{self.index}.stem{si}")
        for oi, op in enumerate(self.operations):
            if op.prelu is not None:
                out.append((f"layer{self.index}.op{oi}.prelu", op.prelu))
        return out

    def named_buffers(self):
        out = []
        for si, stem in enumerate(self.stems):
            out += stem.named_buffers(f"layer{self.index}.stem{si}")
        return out


class MaxPool:
    def __init__(self, kernel=2, stride=None):
        self.kernel = kernel
        self.stride = stride or kernel

    def forward(self, x, training=True):
        return ops.max_pool2d(x, self.kernel, self.stride)


class GlobalAvgPool:
    def forward(self, x, training=True):
        return ops.global_avg_pool(x)


class Flatten:
    def forward(self, x, training=True):
        return ops.flatten(x)


class Linear:
    def __init__(self, in_features, out_features, rng, name="head"):
        self.in_features = in_features
        self.out_features = out_features
        self.weight = Tensor.param(
            ops.kaiming_uniform(rng, (out_features, in_features), in_features), f"{name}.weight")
        self.bias = Tensor.param(np.zeros(out_features), f"{name}.bias")

    def forward(self, x, training=True):
        return ops.linear(x, self.weight, self.bias)


class SearchableNetwork:
    """Ordered blocks (searchable layers, pooling, head) for classification."""

    def __init__(self, blocks, input_shape, n_classes, backbone="custom"):
        self.blocks = list(blocks)
        self.input_shape = tuple(input_shape)
        self.n_classes = n_classes
        self.backbone = backbone
        self._layers = [b for b in self.blocks if isinstance(b, SearchableLayer)]
        self._by_index = {layer.index: layer for layer in self._layers}
        self._trace_geometry()

    def _trace_geometry(self):
        c, h, w = self.input_shape
        flat = None
        for block in self.blocks:
            block.in_geom = (c, h, w)
            if isinstance(block, SearchableLayer):
                if block.in_channels != c:
                    raise ConfigError(
                        f"layer {block.index}: expects {block.in_channels} channels, "
                        f"preceding blocks emit {c}")
                if block.skip_source is not None and block.skip_source not in self._by_index:
                    raise ConfigError(
                        f"layer {block.index}: skip source {block.skip_source} does not exist")
                block.set_geometry(h, w)
                c, h, w = block.out_channels, block.h_out, block.w_out
            elif isinstance(block, MaxPool):
                if h < block.kernel or w < block.kernel:
                    raise ConfigError(f"pool kernel {block.kernel} larger than map {h}x{w}")
                h = (h - block.kernel) // block.stride + 1
                w = (w - block.kernel) // block.stride + 1
            elif isinstance(block, GlobalAvgPool):
                flat = c
                h = w = 1
            elif isinstance(block, Flatten):
                flat = c * h * w
            elif isinstance(block, Linear):
                if flat is None or block.in_features != flat:
                    raise ConfigError(
                        f"linear head expects {block.in_features} features, network provides {flat}")
                flat = block.out_features

    def forward(self, x: Tensor, training=True) -> Tensor:
        if x.data.ndim != 4 or x.data.shape[1:] != self.input_shape:
            raise DimensionError(
                f"network expects input (N, {', '.join(map(str, self.input_shape))}), "
                f"got {x.data.shape}")
        cache = {}
        for block in self.blocks:
            if isinstance(block, SearchableLayer):
                skip = cache[block.skip_source] if block.skip_source is not None else None
                x = block.forward(x, skip, training)
                cache[block.index] = x
            else:
                x = block.forward(x, training)
        return x

    def searchable_layers(self):
        return list(self._layers)

    def layer(self, index) -> SearchableLayer:
        return self._by_index[index]

    def previous_searchable(self, layer):
        prev = None
        for cand in self._layers:
            if cand.index == layer.index:
                return prev
            prev = cand
        return prev

    def input_gamma_sources(self, layer):
        """Gate vectors determining this layer's active input channels.

        Returns None when the input is fixed (the network input); otherwise a
        (vectors, skip_vectors) pair where skip_vectors flattens the whole
        skip chain feeding the preceding layer's output.
        """
        prev = self.previous_searchable(layer)
        if prev is None:
            return None
        skips = []
        src = prev.skip_source
        while src is not None:
            src_layer = self._by_index[src]
            skips.extend(src_layer.gates)
            src = src_layer.skip_source
        return (list(prev.gates), skips)

    def gate_vectors(self):
        out = []
        for layer in self._layers:
            out.extend(layer.gates)
        return out

    def freeze_gates(self, frozen=True):
        for v in self.gate_vectors():
            v.frozen = frozen

    def named_parameters(self):
        out = []
        for block in self.blocks:
            if isinstance(block, SearchableLayer):
                out += block.named_params()
            elif isinstance(block, Linear):
                out += [("head.weight", block.weight), ("head.bias", block.bias)]
        return out

    def named_buffers(self):
        out = []
        for block in self.blocks:
            if isinstance(block, SearchableLayer):
                out += block.named_buffers()
        return out

    def parameters(self):
        return [p for _, p in self.named_parameters()]

    def state_arrays(self):
        """All mutable state as named arrays (for checkpoints)."""
        out = {}
        for name, p in self.named_parameters():
            out[f"param/{name}"] = p.data
        for name, buf in self.named_buffers():
            out[f"buffer/{name}"] = buf
        for layer in self._layers:
            for i, v in enumerate(layer.gates):
                out[f"gate/layer{layer.index}.op{i}.on"] = v.psi_on
                out[f"gate/layer{layer.index}.op{i}.off"] = v.psi_off
        return out

    def load_state_arrays(self, arrays):
        current = self.state_arrays()
        missing = sorted(set(current) - set(arrays))
        if missing:
            raise FormatError(f"checkpoint is missing arrays: {missing[:4]}...")
        for name, target in current.items():
            src = np.asarray(arrays[name])
            if src.shape != target.shape:
                raise FormatError(
                    f"checkpoint array {name!r} has shape {src.shape}, expected {target.shape}")
            target[...] = src.astype(target.dtype)

    def channel_summary(self):
        return [(layer.index, int(layer.union_decisions().sum()), layer.out_channels)
                for layer in self._layers]

    def logits(self, images: np.ndarray, batch_size=256) -> np.ndarray:
        chunks = []
        with no_grad():
            for start in range(0, images.shape[0], batch_size):
                x = Tensor(images[start:start + batch_size])
                chunks.append(self.forward(x, training=False).data)
        return np.concatenate(chunks, axis=0)

    def evaluate(self, images, labels, batch_size=256) -> float:
        return ops.accuracy(self.logits(images, batch_size), labels)


def finetune_mode(net: SearchableNetwork) -> SearchableNetwork:
    """Freeze all gate parameters; decisions stay constant from here on."""
    net.freeze_gates(True)
    return net


# ---------------------------------------------------------------------------
# presets
# ---------------------------------------------------------------------------

def _candidate_specs(space, in_channels, out_channels):
    specs = []
    for conv_type in space.conv_types:
        if conv_type == "depthwise" and in_channels != out_channels:
            continue  # depthwise cannot change the channel count
        for kernel in space.kernels:
            for act in space.activations:
                specs.append(OperationSpec(conv_type, kernel, space.norm, act))
    return specs


def build_network(config, input_shape, n_classes, rng) -> SearchableNetwork:
    """Construct a backbone preset with the configured candidate set attached."""
    c_in, h, w = input_shape
    space = config.search_space
    variant = config.gate_gradient
    blocks = []
    if config.backbone == "plain-cnn":
        if h < 8 or w < 8:
            raise ConfigError(f"plain-cnn needs input of at least 8x8, got {h}x{w}")
        channels = (32, 64, 128, 128)
        prev = c_in
        for li, out_c in enumerate(channels):
            specs = _candidate_specs(space, prev, out_c)
            if not specs:
                raise ConfigError(
                    f"layer {li}: no valid operations (depthwise requires equal channel counts)")
            blocks.append(SearchableLayer(li, prev, out_c, specs, rng, grad_variant=variant))
            if li < 3:
                blocks.append(MaxPool(2, 2))
            prev = out_c
        blocks.append(GlobalAvgPool())
        blocks.append(Linear(channels[-1], n_classes, rng))
    elif config.backbone == "vgg16-cifar":
        if (h, w) != (32, 32):
            raise ConfigError(f"vgg16-cifar requires 32x32 input, got {h}x{w}")
        layout = [64, 64, "M", 128, 128, "M", 256, 256, 256, "M",
                  512, 512, 512, "M", 512, 512, 512, "M"]
        prev, li = c_in, 0
        for item in layout:
            if item == "M":
                blocks.append(MaxPool(2, 2))
                continue
            specs = _candidate_specs(space, prev, item)
            if not specs:
                raise ConfigError(
                    f"layer {li}: no valid operations (depthwise requires equal channel counts)")
            blocks.append(SearchableLayer(li, prev, item, specs, rng, grad_variant=variant))
            prev = item
            li += 1
        blocks.append(Flatten())
        blocks.append(Linear(512, n_classes, rng))
    else:
        raise ConfigError(f"backbone: unknown backbone {config.backbone!r} "
                          f"(expected one of {BACKBONES})")
    return SearchableNetwork(blocks, input_shape, n_classes, config.backbone)


# ---------------------------------------------------------------------------
# compilation
# ---------------------------------------------------------------------------

class CompiledOp:
    """One retained operation with sliced weights and scatter positions."""

    def __init__(self, term, activation, channels, positions, weight, bias,
                 bn=None, prelu=None, gather=None):
        self.term = term
        self.activation = activation
        self.channels = channels          # original channel indices, ascending
        self.positions = positions        # indices into the layer's retained set
        self.weight = weight
        self.bias = bias
        self.bn = bn                      # (gamma, beta, mean, var) or None
        self.prelu = prelu
        self.gather = gather              # depthwise input indices (-1 = pruned input)

    def forward(self, x, collect=None, key=None):
        if self.term.kind == "depthwise":
            n, _, hh, ww = x.shape
            xg = np.zeros((n, len(self.channels), hh, ww), dtype=x.dtype)
            present = self.gather >= 0
            xg[:, present] = x[:, self.gather[present]]
            y = ops.conv2d_raw(xg, self.weight, self.bias, self.term.stride,
                               self.term.kernel // 2, groups=len(self.channels))
        else:
            y = ops.conv2d_raw(x, self.weight, self.bias, self.term.stride,
                               self.term.kernel // 2, groups=1)
        if self.bn is not None:
            gamma, beta, mean, var = self.bn
            if collect is not None:
                bmean = y.mean(axis=(0, 2, 3))
                bvar = y.var(axis=(0, 2, 3))
                sm, sv = collect.setdefault(key, [np.zeros_like(mean, dtype=np.float64),
                                                  np.zeros_like(var, dtype=np.float64)])
                sm += bmean
                sv += bvar
                y = ops.batch_norm_eval_raw(y, gamma, beta, bmean.astype(mean.dtype),
                                            bvar.astype(var.dtype), BN_EPS)
            else:
                y = ops.batch_norm_eval_raw(y, gamma, beta, mean, var, BN_EPS)
        return ops.activation_raw(y, self.activation, self.prelu)


class CompiledLayer:
    def __init__(self, index, divisor, out_channels_orig, in_set, out_set, ops_list,
                 skip_source=None, skip_positions=None, reducer=None, reducer_term=None):
        self.index = index
        self.divisor = divisor
        self.out_channels_orig = out_channels_orig
        self.in_set = in_set
        self.out_set = out_set
        self.ops = ops_list
        self.skip_source = skip_source
        self.skip_positions = skip_positions
        self.reducer = reducer            # CompiledReducer or None
        self.reducer_term = reducer_term

    def forward(self, x, skip=None, collect=None):
        if self.reducer is not None:
            x = ops.conv2d_raw(x, self.reducer.weight, self.reducer.bias, 1, 0, 1)
        n = x.shape[0]
        first = self.ops[0]
        h_out, w_out = first.term.h_out, first.term.w_out
        acc = np.zeros((n, len(self.out_set), h_out, w_out), dtype=x.dtype)
        for oi, op in enumerate(self.ops):
            y = op.forward(x, collect=collect, key=(self.index, oi))
            acc[:, op.positions] += y
        acc = acc * (1.0 / self.divisor)
        if skip is not None:
            acc[:, self.skip_positions] += skip
        return acc


class CompiledReducer:
    def __init__(self, weight, bias):
        self.weight = weight
        self.bias = bias


class CompiledMaxPool:
    def __init__(self, kernel, stride):
        self.kernel = kernel
        self.stride = stride

    def forward(self, x):
        return ops.max_pool2d_raw(x, self.kernel, self.stride)


class CompiledGlobalAvgPool:
    def forward(self, x):
        return ops.global_avg_pool_raw(x)


class CompiledFlatten:
    def forward(self, x):
        return x.reshape(x.shape[0], -1)


class CompiledLinear:
    def __init__(self, weight, bias, in_columns):
        self.weight = weight
        self.bias = bias
        self.in_columns = in_columns

    def forward(self, x):
        return ops.linear_raw(x, self.weight, self.bias)


class CompiledArchitecture:
    """The pruned standalone network extracted from gate decisions."""

    def __init__(self, blocks, input_shape, n_classes, backbone):
        self.blocks = list(blocks)
        self.input_shape = tuple(input_shape)
        self.n_classes = n_classes
        self.backbone = backbone
        self.resources = None  # filled by callers from resource_report

    def compiled_layers(self):
        return [b for b in self.blocks if isinstance(b, CompiledLayer)]

    def head_costs(self):
        params = flops = 0
        for block in self.blocks:
            if isinstance(block, CompiledLinear):
                c_in = block.weight.shape[1]
                c_out = block.weight.shape[0]
                params += c_in * c_out + c_out
                flops += 2 * c_in * c_out
        return params, flops

    def forward(self, images: np.ndarray, collect=None) -> np.ndarray:
        x = np.ascontiguousarray(images)
        cache = {}
        for block in self.blocks:
            if isinstance(block, CompiledLayer):
                skip = cache[block.skip_source] if block.skip_source is not None else None
                x = block.forward(x, skip, collect=collect)
                cache[block.index] = x
            else:
                x = block.forward(x)
        return x

    def logits(self, images, batch_size=256):
        chunks = []
        for start in range(0, images.shape[0], batch_size):
            chunks.append(self.forward(images[start:start + batch_size]))
        return np.concatenate(chunks, axis=0)

    def evaluate(self, images, labels, batch_size=256) -> float:
        return ops.accuracy(self.logits(images, batch_size), labels)


def _out_set(layer, sets):
    own = np.flatnonzero(layer.union_decisions())
    if layer.skip_source is not None:
        own = np.union1d(own, sets[layer.skip_source])
    return own.astype(np.int64)


def compile_network(net: SearchableNetwork) -> CompiledArchitecture:
    """Slice gate decisions into a pruned standalone network.

    Channels whose union mask is zero are dropped, fully-closed operations
    disappear, downstream inputs are sliced accordingly, and the original
    1/M divisor is preserved. Raises :class:`DeadLayerError` when a layer
    has no open channel in any operation.
    """
    sets = {}
    blocks = []
    cur_set = np.arange(net.input_shape[0], dtype=np.int64)
    mode = "channels"
    columns = None
    for block in net.blocks:
        if isinstance(block, SearchableLayer):
            if not block.union_decisions().any():
                raise DeadLayerError(f"dead layer {block.index}: every channel is gated off")
            out_set = _out_set(block, sets)
            sets[block.index] = out_set

            reducer = reducer_term = None
            if block.reducer is not None:
                rw = block.reducer.weight.data[:, cur_set].copy()
                reducer = CompiledReducer(rw, block.reducer.bias.data.copy())
                reducer_term = block.reducer_cost_term()
                op_in_set = np.arange(block.reducer.out_channels, dtype=np.int64)
            else:
                op_in_set = cur_set

            compiled_ops = []
            for op, vec, term in zip(block.operations, block.gates, block.op_cost_terms()):
                channels = np.flatnonzero(vec.psi_on > vec.psi_off).astype(np.int64)
                if channels.size == 0:
                    continue
                positions = np.searchsorted(out_set, channels)
                stem = block.stems[op.stem_index]
                if op.spec.conv_type == "depthwise":
                    weight = stem.weight.data[channels].copy()
                    pos = np.searchsorted(op_in_set, channels)
                    pos_clipped = np.minimum(pos, op_in_set.size - 1)
                    present = op_in_set[pos_clipped] == channels
                    gather = np.where(present, pos_clipped, -1).astype(np.int64)
                else:
                    weight = stem.weight.data[np.ix_(channels, op_in_set)].copy()
                    gather = None
                bias = stem.bias.data[channels].copy()
                bn = None
                if stem.norm == "bn":
                    bn = (stem.bn_gamma.data[channels].copy(), stem.bn_beta.data[channels].copy(),
                          stem.running_mean[channels].copy(), stem.running_var[channels].copy())
                prelu = op.prelu.data[channels].copy() if op.prelu is not None else None
                compiled_ops.append(CompiledOp(term, op.spec.activation, channels, positions,
                                               weight, bias, bn, prelu, gather))

            skip_positions = None
            if block.skip_source is not None:
                src_set = sets[block.skip_source]
                skip_positions = np.searchsorted(out_set, src_set)
                if not np.array_equal(out_set[skip_positions], src_set):
                    raise WiringError(
                        f"layer {block.index}: skip source {block.skip_source} delivers channels "
                        f"missing from the retained set")
            blocks.append(CompiledLayer(block.index, block.num_operations, block.out_channels,
                                        cur_set, out_set, compiled_ops, block.skip_source,
                                        skip_positions, reducer, reducer_term))
            cur_set = out_set
        elif isinstance(block, MaxPool):
            blocks.append(CompiledMaxPool(block.kernel, block.stride))
        elif isinstance(block, GlobalAvgPool):
            blocks.append(CompiledGlobalAvgPool())
            mode = "columns"
            columns = cur_set
        elif isinstance(block, Flatten):
            _, h, w = block.in_geom
            area = h * w
            columns = np.concatenate([c * area + np.arange(area) for c in cur_set]) \
                if cur_set.size else np.empty(0, dtype=np.int64)
            blocks.append(CompiledFlatten())
            mode = "columns"
        elif isinstance(block, Linear):
            if mode != "columns":
                raise ConfigError("linear head must follow a pooling/flatten block")
            weight = block.weight.data[:, columns].copy()
            blocks.append(CompiledLinear(weight, block.bias.data.copy(), columns))
        else:
            raise ConfigError(f"cannot compile block {type(block).__name__}")
    return CompiledArchitecture(blocks, net.input_shape, net.n_classes, net.backbone)


def recalibrate_bn(arch: CompiledArchitecture, batches) -> None:
    """Replace BN running statistics with averages over calibration batches."""
    collect = {}
    count = 0
    for xd in batches:
        arch.forward(xd, collect=collect)
        count += 1
    if count == 0:
        return
    for layer in arch.compiled_layers():
        for oi, op in enumerate(layer.ops):
            if op.bn is None:
                continue
            key = (layer.index, oi)
            sm, sv = collect[key]
            gamma, beta, mean, var = op.bn
            op.bn = (gamma, beta, (sm / count).astype(mean.dtype), (sv / count).astype(var.dtype))
