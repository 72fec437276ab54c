"""Architecture files: a diffable JSON structure document plus a binary
weights sidecar, together describing a compiled (pruned) network.

The JSON lists, per layer, the retained operations with their retained
channel indices, skip/reducer wiring and the fixed divisor; the sidecar
holds the sliced weight arrays. ``load_architecture`` revalidates every
structural invariant before any array is touched.
"""

from __future__ import annotations

import json
import os

import numpy as np

from .checkpoint import container_bytes, parse_container, write_container
from .errors import FormatError, WiringError
from .network import (CompiledArchitecture, CompiledFlatten, CompiledGlobalAvgPool,
                      CompiledLayer, CompiledLinear, CompiledMaxPool, CompiledOp,
                      CompiledReducer)
from .resources import CostTerm

__all__ = ["architecture_to_json", "architecture_weights", "write_architecture",
           "load_architecture", "parse_architecture_json"]

FORMAT_VERSION = 1


def _op_entry(op):
    return {
        "conv_type": op.term.kind,
        "kernel": op.term.kernel,
        "stride": op.term.stride,
        "groups": op.term.groups,
        "norm": "bn" if op.bn is not None else "none",
        "activation": op.activation,
        "channels": [int(c) for c in op.channels],
    }


def architecture_to_json(arch: CompiledArchitecture, weights_file="architecture.weights") -> str:
    blocks = []
    for block in arch.blocks:
        if isinstance(block, CompiledLayer):
            entry = {
                "type": "searchable",
                "index": block.index,
                "out_channels": block.out_channels_orig,
                "divisor": block.divisor,
                "retained": [int(c) for c in block.out_set],
                "skip_source": block.skip_source,
                "reducer": None,
                "geometry": {"h_in": block.ops[0].term.h_in, "w_in": block.ops[0].term.w_in,
                             "h_out": block.ops[0].term.h_out, "w_out": block.ops[0].term.w_out},
                "operations": [_op_entry(op) for op in block.ops],
            }
            if block.reducer is not None:
                entry["reducer"] = {"out_channels": int(block.reducer.weight.shape[0])}
            blocks.append(entry)
        elif isinstance(block, CompiledMaxPool):
            blocks.append({"type": "maxpool", "kernel": block.kernel, "stride": block.stride})
        elif isinstance(block, CompiledGlobalAvgPool):
            blocks.append({"type": "global-avg-pool"})
        elif isinstance(block, CompiledFlatten):
            blocks.append({"type": "flatten"})
        elif isinstance(block, CompiledLinear):
            blocks.append({"type": "linear",
                           "out_features": int(block.weight.shape[0]),
                           "in_columns": [int(c) for c in block.in_columns]})
    doc = {
        "format_version": FORMAT_VERSION,
        "backbone": arch.backbone,
        "input_shape": list(arch.input_shape),
        "n_classes": arch.n_classes,
        "weights_file": weights_file,
        "resources": arch.resources,
        "blocks": blocks,
    }
    return json.dumps(doc, indent=2, sort_keys=True) + "\n"


def architecture_weights(arch: CompiledArchitecture) -> dict:
    arrays = {}
    for bi, block in enumerate(arch.blocks):
        if isinstance(block, CompiledLayer):
            if block.reducer is not None:
                arrays[f"block{bi}.reducer.weight"] = block.reducer.weight
                arrays[f"block{bi}.reducer.bias"] = block.reducer.bias
            for oi, op in enumerate(block.ops):
                p = f"block{bi}.op{oi}"
                arrays[f"{p}.weight"] = op.weight
                arrays[f"{p}.bias"] = op.bias
                if op.bn is not None:
                    gamma, beta, mean, var = op.bn
                    arrays[f"{p}.bn_gamma"] = gamma
                    arrays[f"{p}.bn_beta"] = beta
                    arrays[f"{p}.bn_mean"] = mean
                    arrays[f"{p}.bn_var"] = var
                if op.prelu is not None:
                    arrays[f"{p}.prelu"] = op.prelu
        elif isinstance(block, CompiledLinear):
            arrays[f"block{bi}.weight"] = block.weight
            arrays[f"block{bi}.bias"] = block.bias
    return arrays


def write_architecture(arch: CompiledArchitecture, json_path) -> None:
    json_path = os.fspath(json_path)
    weights_name = os.path.basename(json_path).rsplit(".", 1)[0] + ".weights"
    text = architecture_to_json(arch, weights_file=weights_name)
    weights_path = os.path.join(os.path.dirname(json_path) or ".", weights_name)
    write_container(weights_path, architecture_weights(arch), {"kind": "architecture-weights"})
    tmp = json_path + ".tmp"
    with open(tmp, "w", encoding="utf-8") as fh:
        fh.write(text)
    os.replace(tmp, json_path)


def _check_channels(channels, limit, where):
    arr = np.asarray(channels, dtype=np.int64)
    if arr.size and (np.any(np.diff(arr) <= 0) or arr[0] < 0 or arr[-1] >= limit):
        raise FormatError(f"{where}: channel indices must be strictly increasing, "
                          f"unique and < {limit}, got {channels}")
    return arr


def parse_architecture_json(text: str, source: str = "<architecture>") -> dict:
    try:
        doc = json.loads(text)
    except ValueError as exc:
        raise FormatError(f"{source}: invalid JSON: {exc}") from exc
    if not isinstance(doc, dict) or doc.get("format_version") != FORMAT_VERSION:
        raise FormatError(f"{source}: expected format_version {FORMAT_VERSION}, "
                          f"got {doc.get('format_version')!r}")
    for key in ("backbone", "input_shape", "n_classes", "weights_file", "blocks"):
        if key not in doc:
            raise FormatError(f"{source}: missing key {key!r}")
    for entry in doc["blocks"]:
        if entry.get("type") == "searchable":
            limit = entry["out_channels"]
            where = f"{source}: layer {entry['index']}"
            retained = _check_channels(entry["retained"], limit, where)
            if retained.size == 0:
                raise FormatError(f"{where}: empty retained set")
            union = np.zeros(limit, dtype=bool)
            for oi, op in enumerate(entry["operations"]):
                ch = _check_channels(op["channels"], limit, f"{where} op {oi}")
                if ch.size == 0:
                    raise FormatError(f"{where} op {oi}: retained operation has no channels")
                if np.any(~np.isin(ch, retained)):
                    raise WiringError(f"{where} op {oi}: channels outside the retained set")
                union[ch] = True
            if entry["skip_source"] is None and not np.array_equal(np.flatnonzero(union), retained):
                raise WiringError(f"{where}: retained set does not match the union of operations")
    return doc


def _term_from_entry(layer_entry, op_entry, op_label):
    g = layer_entry["geometry"]
    return CostTerm(
        layer=layer_entry["index"], op=op_label, kind=op_entry["conv_type"],
        kernel=op_entry["kernel"], stride=op_entry["stride"],
        h_in=g["h_in"], w_in=g["w_in"], h_out=g["h_out"], w_out=g["w_out"],
        groups=op_entry.get("groups", 1), bias=True,
        norm_params=2 if op_entry["norm"] == "bn" else 0,
        act_params=1 if op_entry["activation"] == "prelu" else 0)


def _reducer_term(layer_entry):
    g = layer_entry["geometry"]
    return CostTerm(layer=layer_entry["index"], op="reducer", kind="normal", kernel=1,
                    stride=1, h_in=g["h_in"], w_in=g["w_in"], h_out=g["h_in"], w_out=g["w_in"],
                    groups=1, bias=True, norm_params=0, act_params=0)


def load_architecture(json_path) -> CompiledArchitecture:
    json_path = os.fspath(json_path)
    with open(json_path, "r", encoding="utf-8") as fh:
        text = fh.read()
    doc = parse_architecture_json(text, source=json_path)
    weights_path = os.path.join(os.path.dirname(json_path) or ".", doc["weights_file"])
    with open(weights_path, "rb") as fh:
        arrays, _ = parse_container(fh.read(), source=weights_path)

    def take(name, shape=None):
        if name not in arrays:
            raise FormatError(f"{weights_path}: missing array {name!r}")
        arr = arrays[name]
        if shape is not None and arr.shape != tuple(shape):
            raise FormatError(f"{weights_path}: array {name!r} has shape {arr.shape}, "
                              f"expected {tuple(shape)}")
        return arr

    blocks = []
    sets = {}
    cur_set = np.arange(doc["input_shape"][0], dtype=np.int64)
    for bi, entry in enumerate(doc["blocks"]):
        kind = entry["type"]
        if kind == "searchable":
            out_set = np.asarray(entry["retained"], dtype=np.int64)
            reducer = reducer_term = None
            op_in_set = cur_set
            if entry["reducer"] is not None:
                r_out = entry["reducer"]["out_channels"]
                reducer = CompiledReducer(
                    take(f"block{bi}.reducer.weight", (r_out, cur_set.size, 1, 1)),
                    take(f"block{bi}.reducer.bias", (r_out,)))
                reducer_term = _reducer_term(entry)
                op_in_set = np.arange(r_out, dtype=np.int64)
            ops_list = []
            for oi, op_entry in enumerate(entry["operations"]):
                channels = np.asarray(op_entry["channels"], dtype=np.int64)
                positions = np.searchsorted(out_set, channels)
                if not np.array_equal(out_set[positions], channels):
                    raise WiringError(f"{json_path}: layer {entry['index']} op {oi} channels "
                                      f"missing from retained set")
                term = _term_from_entry(entry, op_entry, f"op{oi}")
                p = f"block{bi}.op{oi}"
                k = op_entry["kernel"]
                if op_entry["conv_type"] == "depthwise":
                    weight = take(f"{p}.weight", (channels.size, 1, k, k))
                    pos = np.searchsorted(op_in_set, channels)
                    pos_clipped = np.minimum(pos, op_in_set.size - 1)
                    present = op_in_set[pos_clipped] == channels
                    gather = np.where(present, pos_clipped, -1).astype(np.int64)
                else:
                    weight = take(f"{p}.weight", (channels.size, op_in_set.size, k, k))
                    gather = None
                bias = take(f"{p}.bias", (channels.size,))
                bn = None
                if op_entry["norm"] == "bn":
                    bn = (take(f"{p}.bn_gamma", (channels.size,)),
                          take(f"{p}.bn_beta", (channels.size,)),
                          take(f"{p}.bn_mean", (channels.size,)),
                          take(f"{p}.bn_var", (channels.size,)))
                prelu = take(f"{p}.prelu", (channels.size,)) \
                    if op_entry["activation"] == "prelu" else None
                ops_list.append(CompiledOp(term, op_entry["activation"], channels, positions,
                                           weight, bias, bn, prelu, gather))
            skip_positions = None
            if entry["skip_source"] is not None:
                if entry["skip_source"] not in sets:
                    raise WiringError(f"{json_path}: layer {entry['index']} skips from unknown "
                                      f"layer {entry['skip_source']}")
                src_set = sets[entry["skip_source"]]
                skip_positions = np.searchsorted(out_set, src_set)
                if skip_positions.size and (np.any(skip_positions >= out_set.size)
                                            or not np.array_equal(out_set[skip_positions], src_set)):
                    raise WiringError(f"{json_path}: layer {entry['index']}: skip source channels "
                                      f"missing from the retained set (broken skip)")
            blocks.append(CompiledLayer(entry["index"], entry["divisor"], entry["out_channels"],
                                        cur_set, out_set, ops_list, entry["skip_source"],
                                        skip_positions, reducer, reducer_term))
            sets[entry["index"]] = out_set
            cur_set = out_set
        elif kind == "maxpool":
            blocks.append(CompiledMaxPool(entry["kernel"], entry["stride"]))
        elif kind == "global-avg-pool":
            blocks.append(CompiledGlobalAvgPool())
        elif kind == "flatten":
            blocks.append(CompiledFlatten())
        elif kind == "linear":
            columns = np.asarray(entry["in_columns"], dtype=np.int64)
            weight = take(f"block{bi}.weight", (entry["out_features"], columns.size))
            bias = take(f"block{bi}.bias", (entry["out_features"],))
            blocks.append(CompiledLinear(weight, bias, columns))
        else:
            raise FormatError(f"{json_path}: unknown block type {kind!r}")
    arch = CompiledArchitecture(blocks, tuple(doc["input_shape"]), doc["n_classes"],
                                doc["backbone"])
    arch.resources = doc.get("resources")
    return arch
