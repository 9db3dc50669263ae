from datetime import datetime, timezone

import pytest
from pydantic import ValidationError

from copyforge.models import (
    BucketPrecision,
    ErrorResponse,
    GenerateRequest,
    GenerationRecord,
    HealthCheckResponse,
    Record,
    RType,
)
from copyforge.vocab import Vocabulary, encode_example


class TestGenerateRequest:
    """Test GenerateRequest model"""

    def test_minimal(self):
        request = GenerateRequest(src="hawks 142")
        assert request.beam_size is None
        assert request.max_len is None

    def test_empty_source(self):
        with pytest.raises(ValidationError):
            GenerateRequest(src="")

    @pytest.mark.parametrize("beam_size", [0, 33])
    def test_beam_size_bounds(self, beam_size):
        with pytest.raises(ValidationError):
            GenerateRequest(src="x", beam_size=beam_size)

    def test_max_len_bounds(self):
        assert GenerateRequest(src="x", max_len=512).max_len == 512
        with pytest.raises(ValidationError):
            GenerateRequest(src="x", max_len=0)


class TestRecord:
    """Test data-to-text Record model"""

    def test_alias_and_field_name(self):
        by_alias = Record(entity="hawks", type="POINTS", value=142)
        by_name = Record(entity="hawks", rtype=RType.POINTS, value=142)
        assert by_alias == by_name
        assert by_alias.model_dump(by_alias=True) == {"entity": "hawks", "type": RType.POINTS, "value": 142}

    def test_unknown_type(self):
        with pytest.raises(ValidationError):
            Record(entity="hawks", type="STEALS", value=3)

    def test_value_range(self):
        with pytest.raises(ValidationError):
            Record(entity="hawks", type="POINTS", value=201)

    def test_frozen(self):
        record = Record(entity="hawks", type="WINS", value=3)
        with pytest.raises(ValidationError):
            record.value = 4


class TestEncodedExample:
    """Test EncodedExample helpers"""

    def test_step_flags(self, toy_example):
        assert toy_example.n_steps == 4
        assert toy_example.ext_size == 8
        assert toy_example.is_copy_candidate(0) and toy_example.is_copy_candidate(1)
        assert not toy_example.is_copy_candidate(2)
        assert not toy_example.is_in_vocab(0)
        # EOS step
        assert toy_example.is_in_vocab(3)
        assert not toy_example.is_copy_candidate(3)

    def test_default_mask(self):
        example = encode_example("alpha beta", "beta", Vocabulary(["alpha", "beta"]))
        assert example.mask == [True, True]


class TestGenerationRecord:
    """Test GenerationRecord model"""

    def test_trace_defaults_empty(self):
        assert GenerationRecord(src="a", tgt="b", hyp="c", avg_p_copy=0.2).p_copy_trace == []

    def test_p_copy_range(self):
        with pytest.raises(ValidationError):
            GenerationRecord(src="a", tgt="b", hyp="c", avg_p_copy=1.5)

    def test_bucket_defaults(self):
        buckets = BucketPrecision()
        assert buckets.copy_precision is None
        assert buckets.n_tokens == 0


class TestHealthCheckResponse:
    """Test HealthCheckResponse model"""

    def test_status_literal(self):
        with pytest.raises(ValidationError):
            HealthCheckResponse(
                status="degraded",
                checkpoint=None,
                vocab_size=None,
                timestamp=datetime.now(timezone.utc),
                uptime="0:00:01",
            )


class TestErrorResponse:
    """Test ErrorResponse model"""

    def test_error_response_creation(self):
        response = ErrorResponse(
            error="ContractError",
            message="empty source",
            details={"reason": "empty source"},
            path="/generate",
            request_id="abc",
        )
        assert response.error == "ContractError"
        assert response.details == {"reason": "empty source"}

    def test_model_dump_serializes_timestamp(self):
        data = ErrorResponse(error="X", message="y").model_dump()
        assert isinstance(data["timestamp"], str)
        assert datetime.fromisoformat(data["timestamp"]).tzinfo is not None
        assert data["request_id"] is None
