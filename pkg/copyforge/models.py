from datetime import datetime, timezone
from enum import Enum
from typing import Any, Dict, List, Literal, Optional, Tuple

from pydantic import BaseModel, ConfigDict, Field


# Corpus Models
class EncodedExample(BaseModel):
    """One tokenized source/target pair in base and extended id space.

    Target id sequences carry BOS/EOS; ``copy_candidate`` and ``in_vocab``
    are aligned with ``tgt_tokens`` (no BOS/EOS entries).
    """

    model_config = ConfigDict(frozen=True)

    src_text: str = ""
    tgt_text: str = ""
    src_tokens: List[str]
    src_ids: List[int]
    src_ext_ids: List[int]
    src_mask: Optional[List[bool]] = None
    tgt_tokens: List[str]
    tgt_ids: List[int]
    tgt_ext_ids: List[int]
    oov_list: List[str]
    copy_candidate: List[bool]
    in_vocab: List[bool]
    vocab_size: int

    @property
    def ext_size(self) -> int:
        return self.vocab_size + len(self.oov_list)

    @property
    def mask(self) -> List[bool]:
        if self.src_mask is None:
            return [True] * len(self.src_ids)
        return self.src_mask

    @property
    def n_steps(self) -> int:
        """Decoder steps under teacher forcing: every target token plus EOS."""
        return len(self.tgt_ids) - 1

    def is_copy_candidate(self, t: int) -> bool:
        return t < len(self.copy_candidate) and self.copy_candidate[t]

    def is_in_vocab(self, t: int) -> bool:
        # EOS step is always in-vocabulary
        return t >= len(self.in_vocab) or self.in_vocab[t]


# Data-to-text Models
class RType(str, Enum):
    ASSISTS = "ASSISTS"
    LOSSES = "LOSSES"
    POINTS = "POINTS"
    REBOUNDS = "REBOUNDS"
    WINS = "WINS"


class Record(BaseModel):
    model_config = ConfigDict(frozen=True, populate_by_name=True)

    entity: str
    rtype: RType = Field(..., alias="type")
    value: int = Field(..., ge=0, le=200)


class GameInstance(BaseModel):
    records: List[Record]
    summary: str
    linearized_src: str


# Training / Evaluation Models
class LossBreakdown(BaseModel):
    model_config = ConfigDict(arbitrary_types_allowed=True)

    loss_vocab: float = Field(..., ge=0.0)
    loss_attn: float = Field(..., ge=0.0)
    loss_pgen: float = Field(..., ge=0.0)
    total: float
    per_step: List[Tuple[float, float, float]]
    # differentiable total on the originating tape; not serialized
    total_tensor: Optional[Any] = Field(default=None, exclude=True, repr=False)

    def components(self) -> Dict[str, float]:
        return {
            "loss_total": self.total,
            "loss_vocab": self.loss_vocab,
            "loss_attn": self.loss_attn,
            "loss_pgen": self.loss_pgen,
        }


class EvalReport(BaseModel):
    n_examples: int
    n_steps: int
    loss_total: float
    loss_vocab: float
    loss_attn: float
    loss_pgen: float
    avg_p_gen: float
    avg_p_copy: float


class HistoryRow(BaseModel):
    step: int
    loss_total: float
    loss_vocab: float
    loss_attn: float
    loss_pgen: float
    val_loss: Optional[float] = None
    avg_p_copy: Optional[float] = None


class GradCheckReport(BaseModel):
    max_rel_error: float
    n_checked: int
    passed: bool
    worst_param: Optional[str] = None
    worst_index: Optional[int] = None
    eps: float
    tol: float


# Generation / Metric Models
class GenerationRecord(BaseModel):
    src: str
    tgt: str
    hyp: str
    avg_p_copy: float = Field(..., ge=0.0, le=1.0)
    p_copy_trace: List[float] = Field(default_factory=list)


class BucketPrecision(BaseModel):
    """Precision split by which side of the switch dominated (None = empty)."""

    copy_precision: Optional[float] = None
    copy_share: float = 0.0
    gen_precision: Optional[float] = None
    gen_share: float = 0.0
    n_tokens: int = 0


class MetricsReport(BaseModel):
    n: int
    rouge1_f: float
    rouge2_f: float
    rougeL_f: float
    copy_precision: float
    nn1: float
    nn2: float
    nn3: float
    nn4: float
    avg_p_copy: float
    # abstractness of the reference summaries themselves
    gold_nn1: float = 0.0
    gold_nn2: float = 0.0
    gold_nn3: float = 0.0
    gold_nn4: float = 0.0


class D2TReport(BaseModel):
    n: int
    rg_precision: float
    rg_count: float
    cs_precision: float
    cs_recall: float
    co: float
    buckets: BucketPrecision


class SweepRow(BaseModel):
    vocab_size: int
    type_coverage: float
    oov_rate: float
    rouge1_f: float
    rouge2_f: float
    rougeL_f: float
    nn1: float
    nn2: float
    nn3: float
    nn4: float
    avg_p_copy: float


# API Models
class GenerateRequest(BaseModel):
    src: str = Field(..., min_length=1)
    beam_size: Optional[int] = Field(default=None, ge=1, le=32)
    max_len: Optional[int] = Field(default=None, ge=1, le=512)


class GenerateResponse(BaseModel):
    hyp: str
    avg_p_copy: float
    p_copy_trace: List[float]


class HealthCheckResponse(BaseModel):
    status: Literal["healthy", "unhealthy"]
    checkpoint: Optional[str]
    vocab_size: Optional[int]
    timestamp: datetime
    uptime: str


class ErrorResponse(BaseModel):
    """Standardized error response format for API endpoints."""

    error: str = Field(..., description="Error type/class name")
    message: str = Field(..., description="Human-readable error message")
    details: Optional[Dict[str, Any]] = Field(
        default=None, description="Additional error context"
    )
    timestamp: datetime = Field(default_factory=lambda: datetime.now(timezone.utc))
    request_id: Optional[str] = Field(
        default=None, description="Request correlation ID"
    )
    path: Optional[str] = Field(default=None, description="API endpoint path")

    def model_dump(self, **kwargs: Any) -> Dict[str, Any]:
        """Override model_dump to handle datetime serialization."""
        data = super().model_dump(**kwargs)
        if "timestamp" in data and isinstance(data["timestamp"], datetime):
            data["timestamp"] = data["timestamp"].isoformat()
        return data
