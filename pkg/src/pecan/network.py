"""Network descriptions: layer specs, shape chaining, the 28x28 digit net."""

from __future__ import annotations

from dataclasses import dataclass, field, replace

from .matcher import METHODS
from .tensor import ConvGeometry, ShapeError


@dataclass
class LayerSpec:
    """One layer of a feedforward net.

    kind is one of conv/fc/relu/maxpool. conv and fc layers carry a matching
    method: "baseline" computes W x directly, "pecan_a" and "pecan_d"
    reconstruct the layer input from a codebook of p prototypes per group,
    with the input rows split into D groups of width d (D * d must equal
    c_in * k * k for conv, in_features for fc).
    """

    name: str
    kind: str
    c_in: int = 0
    c_out: int = 0
    k: int = 0
    stride: int = 1
    padding: int = 0
    method: str = "baseline"
    p: int = 0
    D: int = 0
    d: int = 0
    tau: float = 1.0

    def validate(self):
        if self.kind not in ("conv", "fc", "relu", "maxpool"):
            raise ValueError(f"layer {self.name}: unknown kind {self.kind!r}")
        if self.kind in ("relu", "maxpool"):
            return
        if self.method not in METHODS:
            raise ValueError(f"layer {self.name}: unknown method {self.method!r}")
        if self.c_in < 1 or self.c_out < 1:
            raise ValueError(f"layer {self.name}: c_in/c_out must be positive")
        if self.kind == "conv" and self.k < 1:
            raise ValueError(f"layer {self.name}: conv kernel must be positive")
        if self.method != "baseline":
            rows = self.rows
            if self.p < 1 or self.D < 1 or self.d < 1:
                raise ValueError(f"layer {self.name}: p, D, d must all be positive")
            if self.D * self.d != rows:
                raise ValueError(
                    f"layer {self.name}: D*d = {self.D}*{self.d} must equal "
                    f"c_in*k*k = {rows}"
                )
            if self.tau <= 0:
                raise ValueError(f"layer {self.name}: tau must be positive")

    @property
    def rows(self) -> int:
        """Width of the unfolded input: c_in*k*k for conv, in_features for fc."""
        return self.c_in * self.k * self.k if self.kind == "conv" else self.c_in

    @property
    def is_param(self) -> bool:
        return self.kind in ("conv", "fc")


@dataclass
class NetworkSpec:
    """Layer list plus input shape; validation chains shapes end to end."""

    layers: list[LayerSpec]
    input_shape: tuple[int, int, int]
    shapes: list = field(default_factory=list, repr=False)

    def validate(self) -> "NetworkSpec":
        """Check every layer and record each layer's input shape.

        shapes[i] is what layer i consumes: (c, h, w) before flattening,
        (features,) after. Raises ShapeError or ValueError on any mismatch.
        """
        names = [ly.name for ly in self.layers]
        if len(set(names)) != len(names):
            raise ValueError(f"duplicate layer names: {names}")
        shape: tuple = self.input_shape
        self.shapes = []
        for ly in self.layers:
            ly.validate()
            self.shapes.append(shape)
            if ly.kind == "conv":
                if len(shape) != 3 or shape[0] != ly.c_in:
                    raise ShapeError(f"layer {ly.name}: expects {ly.c_in} channels, input is {shape}")
                g = ConvGeometry(ly.c_in, shape[1], shape[2], ly.k, ly.stride, ly.padding)
                shape = (ly.c_out, g.h_out, g.w_out)
            elif ly.kind == "maxpool":
                if len(shape) != 3:
                    raise ShapeError(f"layer {ly.name}: maxpool needs a [c, h, w] input, got {shape}")
                kk, ss = ly.k, ly.stride
                if kk < 1 or ss < 1:
                    raise ValueError(f"layer {ly.name}: pool window and stride must be positive")
                # floor semantics: trailing rows/cols that do not fill a window are dropped
                shape = (shape[0], (shape[1] - kk) // ss + 1, (shape[2] - kk) // ss + 1)
            elif ly.kind == "fc":
                feats = shape[0] if len(shape) == 1 else shape[0] * shape[1] * shape[2]
                if feats != ly.c_in:
                    raise ShapeError(f"layer {ly.name}: expects {ly.c_in} features, input is {shape}")
                shape = (ly.c_out,)
            # relu keeps the shape
        self.shapes.append(shape)
        return self

    @property
    def output_shape(self) -> tuple:
        if not self.shapes:
            self.validate()
        return self.shapes[-1]

    def param_layers(self) -> list[LayerSpec]:
        return [ly for ly in self.layers if ly.is_param]

    def conv_geometry(self, layer: LayerSpec) -> ConvGeometry | None:
        """Geometry of a conv layer given its chained input shape (fc -> None)."""
        if not self.shapes:
            self.validate()
        if layer.kind != "conv":
            return None
        shape = self.shapes[self.layers.index(layer)]
        return ConvGeometry(layer.c_in, shape[1], shape[2], layer.k, layer.stride, layer.padding)


# Published per-layer settings: name -> (p, D, d) for each variant.
PECAN_A_PRESETS = {
    "conv1": (4, 1, 9),
    "conv2": (8, 3, 24),
    "fc1": (8, 25, 16),
    "fc2": (8, 8, 16),
    "fc3": (8, 4, 16),
}
PECAN_D_PRESETS = {
    "conv1": (64, 1, 9),
    "conv2": (64, 8, 9),
    "fc1": (64, 50, 8),
    "fc2": (64, 16, 8),
    "fc3": (64, 8, 8),
}
DEFAULT_TAU = {"baseline": 1.0, "pecan_a": 1.0, "pecan_d": 0.5}


def lenet(method: str = "baseline", tau: float | None = None) -> NetworkSpec:
    """The modified 5-layer digit net on 1x28x28 inputs.

    conv1 3x3 1->8, pool, conv2 3x3 8->16, pool, fc 400->128->64->10 with
    ReLU between. method selects the matching variant for every conv/fc
    layer at once, with the published (p, D, d) per layer.
    """
    if method not in METHODS:
        raise ValueError(f"unknown method {method!r}")
    t = DEFAULT_TAU[method] if tau is None else tau
    layers = [
        LayerSpec("conv1", "conv", c_in=1, c_out=8, k=3),
        LayerSpec("relu1", "relu"),
        LayerSpec("pool1", "maxpool", k=2, stride=2),
        LayerSpec("conv2", "conv", c_in=8, c_out=16, k=3),
        LayerSpec("relu2", "relu"),
        LayerSpec("pool2", "maxpool", k=2, stride=2),
        LayerSpec("fc1", "fc", c_in=400, c_out=128),
        LayerSpec("relu3", "relu"),
        LayerSpec("fc2", "fc", c_in=128, c_out=64),
        LayerSpec("relu4", "relu"),
        LayerSpec("fc3", "fc", c_in=64, c_out=10),
    ]
    if method != "baseline":
        presets = PECAN_A_PRESETS if method == "pecan_a" else PECAN_D_PRESETS
        layers = [
            replace(ly, method=method, tau=t, p=presets[ly.name][0], D=presets[ly.name][1], d=presets[ly.name][2])
            if ly.name in presets
            else ly
            for ly in layers
        ]
    return NetworkSpec(layers, (1, 28, 28)).validate()


_LAYER_FIELDS = ("kind", "c_in", "c_out", "k", "stride", "padding", "method", "p", "D", "d", "tau")


def spec_to_manifest(spec: NetworkSpec) -> dict:
    """Flatten a network spec into string key/value pairs for a checkpoint."""
    out = {"net.input_shape": ",".join(str(v) for v in spec.input_shape), "net.n_layers": str(len(spec.layers))}
    for i, ly in enumerate(spec.layers):
        out[f"net.layer{i}.name"] = ly.name
        for f in _LAYER_FIELDS:
            out[f"net.layer{i}.{f}"] = str(getattr(ly, f))
    return out


def spec_from_manifest(man: dict) -> NetworkSpec:
    """Rebuild a validated NetworkSpec from manifest key/value pairs."""
    try:
        shape = tuple(int(v) for v in man["net.input_shape"].split(","))
        n = int(man["net.n_layers"])
        layers = []
        for i in range(n):
            kw = {"name": man[f"net.layer{i}.name"]}
            for f in _LAYER_FIELDS:
                raw = man[f"net.layer{i}.{f}"]
                kw[f] = raw if f in ("kind", "method") else (float(raw) if f == "tau" else int(raw))
            layers.append(LayerSpec(**kw))
    except KeyError as e:
        raise ValueError(f"manifest is missing network key {e}") from None
    return NetworkSpec(layers, shape).validate()
