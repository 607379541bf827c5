"""
Model for OpenSetMargin - Encoder, generator and discriminator network module.
Defines the fully-connected E -> G -> D stack, its seeded initialization and its forward pass.
"""

import logging
from dataclasses import dataclass
from typing import List, Optional, Tuple

import numpy as np

from openset_margin import autodiff as ad
from openset_margin.errors import ConfigValidationError, ContractError

logger = logging.getLogger('OpenSetMargin.Model')


@dataclass(frozen=True)
class MLPSpec:
    """Widths and layer options of one fully-connected stack"""

    layer_widths: Tuple[int, ...]
    use_batchnorm: Tuple[bool, ...]
    leaky_alpha: float = 0.01
    activate_output: bool = True

    def __post_init__(self):
        object.__setattr__(self, 'layer_widths', tuple(int(w) for w in self.layer_widths))
        object.__setattr__(self, 'use_batchnorm', tuple(bool(b) for b in self.use_batchnorm))
        if len(self.layer_widths) < 2:
            raise ConfigValidationError(f"an MLP needs at least one layer, got widths {list(self.layer_widths)}",
                                        field='layer_widths')
        if any(w <= 0 for w in self.layer_widths):
            raise ConfigValidationError(f"layer widths must be positive, got {list(self.layer_widths)}",
                                        field='layer_widths')
        if len(self.use_batchnorm) != self.n_layers:
            raise ConfigValidationError(
                f"use_batchnorm needs one flag per layer ({self.n_layers}), got {len(self.use_batchnorm)}",
                field='use_batchnorm')
        if self.leaky_alpha < 0.0:
            raise ConfigValidationError(f"leaky_alpha must be >= 0, got {self.leaky_alpha}", field='leaky_alpha')

    @property
    def n_layers(self):
        return len(self.layer_widths) - 1

    @property
    def in_width(self):
        return self.layer_widths[0]

    @property
    def out_width(self):
        return self.layer_widths[-1]


@dataclass(frozen=True)
class NetworkSpecs:
    encoder: MLPSpec
    generator: MLPSpec
    discriminator: MLPSpec


def default_specs(input_dim, n_known, encoder_hidden=(32, 16), generator_width=16, leaky_alpha=0.01):
    """E: d -> 32 -> 16, G: 16 -> 16 (FC + LeakyReLU + BN), D: 16 -> N+1 logits"""
    encoder_widths = (input_dim,) + tuple(encoder_hidden)
    encoder = MLPSpec(encoder_widths, (True,) * (len(encoder_widths) - 1), leaky_alpha)
    generator = MLPSpec((encoder_widths[-1], generator_width), (True,), leaky_alpha)
    discriminator = MLPSpec((generator_width, n_known + 1), (False,), leaky_alpha, activate_output=False)
    return NetworkSpecs(encoder, generator, discriminator)


@dataclass
class LayerParams:
    weight: ad.TensorNode
    bias: ad.TensorNode
    gamma: Optional[ad.TensorNode] = None
    beta: Optional[ad.TensorNode] = None
    bn_state: Optional[ad.BatchNormState] = None

    def parameters(self):
        nodes = [self.weight, self.bias]
        if self.gamma is not None:
            nodes += [self.gamma, self.beta]
        return nodes


@dataclass
class MLPParams:
    spec: MLPSpec
    layers: List[LayerParams]

    def parameters(self):
        return [p for layer in self.layers for p in layer.parameters()]

    def forward(self, x, mode):
        h = x
        for i, layer in enumerate(self.layers):
            h = h @ layer.weight + layer.bias
            last = i == len(self.layers) - 1
            if not last or self.spec.activate_output:
                h = ad.relu_leaky(h, self.spec.leaky_alpha)
            if self.spec.use_batchnorm[i]:
                h = ad.batch_norm(h, layer.gamma, layer.beta, layer.bn_state, mode)
        return h


@dataclass
class NetworkParams:
    """Weights and batch-norm state of E, G and D"""

    encoder: MLPParams
    generator: MLPParams
    discriminator: MLPParams

    @property
    def n_known(self):
        return self.discriminator.spec.out_width - 1

    @property
    def feature_dim(self):
        return self.generator.spec.out_width

    @property
    def input_dim(self):
        return self.encoder.spec.in_width

    @property
    def specs(self):
        return NetworkSpecs(self.encoder.spec, self.generator.spec, self.discriminator.spec)

    def parameters(self, include_encoder=True):
        nodes = self.encoder.parameters() if include_encoder else []
        return nodes + self.generator.parameters() + self.discriminator.parameters()

    def zero_grad(self):
        ad.zero_grad(self.parameters())


def _check_specs(specs):
    if specs.encoder.out_width != specs.generator.in_width:
        raise ConfigValidationError(
            f"encoder output width {specs.encoder.out_width} != generator input width {specs.generator.in_width}",
            field='generator')
    if specs.generator.out_width != specs.discriminator.in_width:
        raise ConfigValidationError(
            f"generator output width {specs.generator.out_width} != discriminator input width "
            f"{specs.discriminator.in_width}", field='discriminator')
    if specs.discriminator.out_width < 3:
        raise ConfigValidationError(
            f"discriminator needs N+1 >= 3 outputs, got {specs.discriminator.out_width}", field='discriminator')


def _init_mlp(spec, rng, prefix):
    layers = []
    for i in range(spec.n_layers):
        fan_in, fan_out = spec.layer_widths[i], spec.layer_widths[i + 1]
        bound = np.sqrt(6.0 / fan_in)
        layer = LayerParams(
            weight=ad.parameter(rng.uniform(-bound, bound, size=(fan_in, fan_out)), name=f"{prefix}.{i}.weight"),
            bias=ad.parameter(np.zeros((1, fan_out)), name=f"{prefix}.{i}.bias"),
        )
        if spec.use_batchnorm[i]:
            layer.gamma = ad.parameter(np.ones((1, fan_out)), name=f"{prefix}.{i}.gamma")
            layer.beta = ad.parameter(np.zeros((1, fan_out)), name=f"{prefix}.{i}.beta")
            layer.bn_state = ad.BatchNormState.fresh(fan_out)
        layers.append(layer)
    return MLPParams(spec, layers)


def init_params(specs, seed):
    """
    He-style fan-in uniform initialization of E, G and D

    Args:
        specs (NetworkSpecs): Layer layout of the three stacks
        seed (int): Seed; each stack draws from its own child stream

    Returns:
        NetworkParams: Freshly initialized parameters
    """
    _check_specs(specs)
    streams = [np.random.default_rng(s) for s in np.random.SeedSequence(int(seed)).spawn(3)]
    params = NetworkParams(
        encoder=_init_mlp(specs.encoder, streams[0], 'encoder'),
        generator=_init_mlp(specs.generator, streams[1], 'generator'),
        discriminator=_init_mlp(specs.discriminator, streams[2], 'discriminator'),
    )
    logger.debug(f"Initialized network with {sum(p.data.size for p in params.parameters())} weights")
    return params


def forward(params, x, mode=ad.TRAIN, freeze_encoder=False):
    """
    Run a batch through E, G and D

    Args:
        params (NetworkParams): Network weights
        x (np.ndarray | TensorNode): Batch of shape (n, d)
        mode (str): 'train' or 'eval'
        freeze_encoder (bool): Run E in eval mode outside the graph so it receives no gradient

    Returns:
        tuple: (features G(E(x)), logits D(G(E(x))))
    """
    node = x if isinstance(x, ad.TensorNode) else ad.constant(x)
    if node.shape[1] != params.input_dim:
        raise ContractError(f"input has {node.shape[1]} features, encoder expects {params.input_dim}")
    if freeze_encoder:
        encoded = ad.detach(params.encoder.forward(node, ad.EVAL))
    else:
        encoded = params.encoder.forward(node, mode)
    features = params.generator.forward(encoded, mode)
    logits = params.discriminator.forward(features, mode)
    return features, logits


def predict(params, x):
    """Eval-mode features and argmax class over N+1 logits"""
    features, logits = forward(params, x, ad.EVAL)
    return features.data, np.argmax(logits.data, axis=1)
