import hashlib
import json
from typing import Any, Dict, List, Literal, Optional

from pydantic import BaseModel, ConfigDict, Field, model_validator

from .config import (
    BIAS_SCALE,
    BLOCK_ALPHA,
    CODE_VERSION,
    DARMOIS_NODES,
    EVAL_BATCH,
    EVAL_SAMPLES,
    FLOW_BLOCKS,
    HIDDEN_LAYERS,
    HIDDEN_WIDTH,
    LEAKY_ALPHA,
    LIPSCHITZ_COEFF,
    OUTPUT_DIR,
    POWER_ITERS,
)

RegKind = Literal["none", "cima", "l1", "l2"]
InitKind = Literal["orthogonal", "uniform"]
PriorKind = Literal["standard_normal", "uniform01"]
BaseKind = Literal["gaussian", "logistic"]
FlowKind = Literal["full", "triangular"]
SuiteName = Literal["fig1", "figA_uniform", "recovery", "training_dynamics", "reg_comparison"]


class StrictModel(BaseModel):
    model_config = ConfigDict(extra="forbid")


class RegularizerSpec(StrictModel):
    kind: RegKind = Field("none", description="Penalty family: none, cima (lambda), l1 (gamma), l2 (beta)")
    strength: float = Field(0.0, ge=0.0, description="lambda / gamma / beta")

    @model_validator(mode="after")
    def _normalize(self) -> "RegularizerSpec":
        if self.kind == "none" and self.strength != 0.0:
            raise ValueError("kind 'none' cannot carry a nonzero strength")
        if self.strength == 0.0 and self.kind != "none":
            self.kind = "none"
        return self

    @property
    def label(self) -> str:
        return "none" if self.kind == "none" else f"{self.kind}={self.strength:g}"


class TrainConfig(StrictModel):
    iterations: int = Field(20000, ge=1)
    batch_size: int = Field(256, ge=2)
    learning_rate: float = Field(1e-3, gt=0.0)
    optimizer: Literal["adam"] = "adam"
    adam_beta1: float = Field(0.9, ge=0.0, lt=1.0)
    adam_beta2: float = Field(0.999, ge=0.0, lt=1.0)
    adam_eps: float = Field(1e-8, gt=0.0)
    seed: int = Field(0, ge=0, lt=2**64)
    data_source: Literal["fresh_resample", "fixed_dataset"] = "fresh_resample"
    dataset_size: int = Field(10000, ge=2, description="Only used by fixed_dataset")
    eval_every: int = Field(500, ge=1)
    eval_batch: int = Field(EVAL_BATCH, ge=2)
    grad_clip: float = Field(100.0, gt=0.0)
    power_iters: int = Field(POWER_ITERS, ge=1)
    lipschitz_pairs: int = Field(128, ge=0, description="Pairs per block for the post-step Lipschitz audit; 0 disables")


class FlowSpec(StrictModel):
    blocks: int = Field(FLOW_BLOCKS, ge=1)
    hidden_width: int = Field(HIDDEN_WIDTH, ge=1)
    hidden_layers: int = Field(HIDDEN_LAYERS, ge=1)
    coeff: float = Field(LIPSCHITZ_COEFF, gt=0.0, lt=1.0)
    block_alpha: float = Field(BLOCK_ALPHA, gt=0.0)


class SuiteConfig(StrictModel):
    suite: SuiteName
    n: int = Field(5, ge=2)
    dims: List[int] = Field(default_factory=list, description="Dimensions swept by training_dynamics; empty means [n]")
    layers: List[int] = Field(default_factory=lambda: [2, 4, 8])
    init_kind: InitKind = "orthogonal"
    prior: PriorKind = "standard_normal"
    seeds: List[int] = Field(default_factory=lambda: [0, 1, 2, 3, 4])
    regularizers: List[RegularizerSpec] = Field(default_factory=list)
    train: TrainConfig = Field(default_factory=TrainConfig)
    flow: FlowSpec = Field(default_factory=FlowSpec)
    alpha: float = Field(LEAKY_ALPHA, gt=0.0)
    bias_scale: float = Field(BIAS_SCALE, ge=0.0)
    eval_samples: int = Field(EVAL_SAMPLES, ge=100)
    darmois_nodes: int = Field(DARMOIS_NODES, ge=16)
    out_dir: str = OUTPUT_DIR
    threads: int = Field(1, ge=1)


class LayerDocument(StrictModel):
    weight: List[List[float]]
    bias: List[float]


class MixingDocument(StrictModel):
    n: int = Field(..., ge=2)
    L: int = Field(..., ge=1)
    alpha: float = Field(..., gt=0.0)
    init_kind: InitKind
    seed: int
    layers: List[LayerDocument]


class BlockDocument(StrictModel):
    weights: List[List[List[float]]]
    biases: List[List[float]]
    power_vectors: List[List[float]]
    masks: Optional[List[List[List[float]]]] = None


class CheckpointDocument(StrictModel):
    n: int
    kind: FlowKind
    base: BaseKind
    flow: FlowSpec
    seed: int
    blocks: List[BlockDocument]
    train_config_hash: Optional[str] = None


class RunManifest(StrictModel):
    command: str
    config: Dict[str, Any]
    seeds: Dict[str, int] = Field(default_factory=dict)
    code_version: str = CODE_VERSION

    @property
    def code_hash(self) -> str:
        return hashlib.sha256(self.code_version.encode("utf-8")).hexdigest()[:12]

    @property
    def digest(self) -> str:
        payload = json.dumps(self.model_dump(), sort_keys=True, separators=(",", ":"))
        return hashlib.sha256((payload + self.code_hash).encode("utf-8")).hexdigest()[:16]


def config_hash(model: BaseModel) -> str:
    payload = json.dumps(model.model_dump(), sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(payload.encode("utf-8")).hexdigest()[:16]


class RunConfig(StrictModel):
    """Config file for single runs (train, darmois train)."""

    train: TrainConfig = Field(default_factory=TrainConfig)
    flow: FlowSpec = Field(default_factory=FlowSpec)
