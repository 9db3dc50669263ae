import numpy as np
import pytest

from copyforge.autodiff import Tape
from copyforge.config import CopyMode, ModelConfig
from copyforge.exceptions import ContractError, EmptyDistributionError
from copyforge.network import (
    P_GEN_FLOOR,
    ModelParameters,
    attention,
    decoder_step,
    encode,
    final_distribution,
    generation_probability,
    init_params,
    initial_state,
    parameter_shapes,
    positional_encoding,
    teacher_forced_steps,
    vocab_distribution,
)
from copyforge.pipeline import grad_check_toy
from copyforge.vocab import BOS, PAD, encode_example


def leaves(tape, **arrays):
    return {name.replace("__", "."): tape.leaf(np.asarray(value, dtype=float)) for name, value in arrays.items()}


class TestInitParams:
    """Test parameter initialization"""

    def test_same_seed_bitwise_identical(self, tiny_config):
        a, b = init_params(tiny_config), init_params(tiny_config)
        for name in a.names():
            np.testing.assert_array_equal(a[name], b[name])

    def test_different_seed_differs(self, tiny_config):
        a = init_params(tiny_config)
        b = init_params(tiny_config.model_copy(update={"seed": 4}))
        assert not np.array_equal(a["embedding"], b["embedding"])

    def test_biases_zero_weights_nonzero(self, tiny_params):
        for name in tiny_params.names():
            value = tiny_params[name]
            assert np.all(np.isfinite(value))
            if name.endswith(".bias"):
                assert not value.any()
            else:
                assert np.linalg.norm(value) > 0

    def test_shapes_follow_config(self, tiny_config, tiny_params):
        shapes = dict(parameter_shapes(tiny_config))
        assert tiny_params.names() == [name for name, _ in parameter_shapes(tiny_config)]
        for name, shape in shapes.items():
            assert tiny_params[name].shape == shape
        assert shapes["decoder.0.lstm"] == (4 + 4 + 4, 16)
        assert shapes["switch.bias"] == (1,)

    def test_stacked_decoder_layers(self, tiny_config):
        shapes = dict(parameter_shapes(tiny_config.model_copy(update={"dec_layers": 2})))
        assert shapes["decoder.1.lstm"] == (8, 16)

    def test_no_decay_names(self):
        assert ModelParameters.no_decay("encoder.0.ln1.gain")
        assert ModelParameters.no_decay("output.W_v.bias")
        assert not ModelParameters.no_decay("attention.v")
        assert not ModelParameters.no_decay("embedding")

    def test_heads_must_divide_embedding(self):
        with pytest.raises(ValueError):
            ModelConfig(emb_dim=6, enc_heads=4)


class TestEncode:
    """Test the transformer encoder"""

    def test_single_token_shape(self, tiny_config, tiny_params):
        out = encode([4], tiny_params.on_tape(Tape()), tiny_config)
        assert out.h.shape == (1, tiny_config.hidden_dim)

    def test_permutation_changes_states(self, tiny_config, tiny_params):
        a = encode([4, 5], tiny_params.on_tape(Tape()), tiny_config).h.values
        b = encode([5, 4], tiny_params.on_tape(Tape()), tiny_config).h.values
        assert not np.allclose(a[0], b[1])

    def test_trailing_padding_ignored(self, tiny_config, tiny_params):
        plain = encode([4, 5, 6], tiny_params.on_tape(Tape()), tiny_config).h.values
        padded = encode(
            [4, 5, 6, PAD, PAD], tiny_params.on_tape(Tape()), tiny_config, [True, True, True, False, False]
        ).h.values
        np.testing.assert_allclose(padded[:3], plain, atol=1e-12)

    def test_multi_head(self, tiny_config):
        config = tiny_config.model_copy(update={"enc_heads": 2})
        out = encode([4, 5], init_params(config).on_tape(Tape()), config)
        assert out.h.shape == (2, config.hidden_dim)

    def test_empty_source(self, tiny_config, tiny_params):
        with pytest.raises(ContractError):
            encode([], tiny_params.on_tape(Tape()), tiny_config)

    def test_length_overflow(self, tiny_config, tiny_params):
        with pytest.raises(ContractError) as exc_info:
            encode([4] * (tiny_config.max_src_len + 1), tiny_params.on_tape(Tape()), tiny_config)
        assert exc_info.value.details["reason"] == "length overflow"

    def test_positional_encoding_first_row(self):
        pe = positional_encoding(3, 4)
        np.testing.assert_allclose(pe[0], [0.0, 1.0, 0.0, 1.0])


class TestAttention:
    """Test Bahdanau attention"""

    def test_single_position(self, rng):
        tape = Tape()
        params = leaves(
            tape,
            attention__W_h=rng.normal(size=(2, 2)),
            attention__W_s=rng.normal(size=(2, 2)),
            attention__v=rng.normal(size=2),
        )
        h = tape.leaf([[0.3, -0.2]])
        alpha, c = attention(h, tape.leaf([0.1, 0.4]), [True], params)
        np.testing.assert_array_equal(alpha.values, [1.0])
        np.testing.assert_allclose(c.values, [0.3, -0.2])

    def test_identical_states_uniform(self, rng):
        tape = Tape()
        params = leaves(
            tape,
            attention__W_h=rng.normal(size=(2, 2)),
            attention__W_s=rng.normal(size=(2, 2)),
            attention__v=rng.normal(size=2),
        )
        h = tape.leaf([[0.5, 0.5]] * 3)
        alpha, _ = attention(h, tape.leaf([0.2, -0.1]), [True] * 3, params)
        np.testing.assert_allclose(alpha.values, [1 / 3] * 3)

    def test_hand_sized_instance(self):
        W_h = np.array([[1.0, 0.0], [0.5, -1.0]])
        W_s = np.array([[0.2, 0.3], [0.0, 1.0]])
        v = np.array([1.0, -2.0])
        h = np.array([[0.1, 0.2], [-0.3, 0.4]])
        s = np.array([0.5, -0.5])
        tape = Tape()
        params = leaves(tape, attention__W_h=W_h, attention__W_s=W_s, attention__v=v)
        alpha, c = attention(tape.leaf(h), tape.leaf(s), [True, True], params)

        e = np.array([v @ np.tanh(h[i] @ W_h + s @ W_s) for i in range(2)])
        expected = np.exp(e) / np.exp(e).sum()
        np.testing.assert_allclose(alpha.values, expected, atol=1e-12)
        np.testing.assert_allclose(c.values, expected @ h, atol=1e-12)

    def test_all_masked(self, rng):
        tape = Tape()
        params = leaves(
            tape,
            attention__W_h=np.eye(2),
            attention__W_s=np.eye(2),
            attention__v=np.ones(2),
        )
        with pytest.raises(EmptyDistributionError):
            attention(tape.leaf([[0.1, 0.2]]), tape.leaf([0.0, 0.0]), [False], params)


class TestDistributions:
    """Test the vocabulary, switch and mixture distributions"""

    def test_zero_weights_uniform_vocab(self):
        tape = Tape()
        params = leaves(
            tape,
            output__W_v=np.zeros((4, 2)),
            output__W_v__bias=np.zeros(2),
            output__W_vprime=np.zeros((2, 5)),
            output__W_vprime__bias=np.zeros(5),
        )
        p = vocab_distribution(tape.leaf([1.0, 2.0]), tape.leaf([3.0, 4.0]), params)
        np.testing.assert_allclose(p.values, [0.2] * 5)

    def test_vocab_hand_sized_instance(self):
        W_v = np.array([[1.0, 0.0], [0.0, 1.0], [0.5, 0.5], [-1.0, 0.0]])
        b = np.array([0.1, -0.1])
        W_vp = np.array([[1.0, -1.0, 0.0], [0.0, 2.0, 1.0]])
        bp = np.array([0.0, 0.5, -0.5])
        tape = Tape()
        params = leaves(
            tape, output__W_v=W_v, output__W_v__bias=b, output__W_vprime=W_vp, output__W_vprime__bias=bp
        )
        s, c = np.array([0.2, -0.4]), np.array([0.3, 0.1])
        p = vocab_distribution(tape.leaf(s), tape.leaf(c), params)
        logits = (np.concatenate([s, c]) @ W_v + b) @ W_vp + bp
        expected = np.exp(logits) / np.exp(logits).sum()
        np.testing.assert_allclose(p.values, expected, atol=1e-12)
        assert abs(p.values.sum() - 1.0) <= 1e-9

    def _switch_params(self, tape, bias=0.0, scale=0.0):
        return leaves(
            tape,
            switch__w_h=np.full((2, 1), scale),
            switch__w_s=np.full((2, 1), scale),
            switch__w_y=np.full((3, 1), scale),
            switch__bias=[bias],
        )

    def test_zero_switch_is_half(self):
        tape = Tape()
        p = generation_probability(
            tape.leaf([0.0, 0.0]), tape.leaf([0.0, 0.0]), tape.leaf([0.0] * 3), self._switch_params(tape)
        )
        assert p.item() == pytest.approx(0.5, abs=1e-15)

    def test_switch_saturates_at_clamp(self):
        tape = Tape()
        p = generation_probability(
            tape.leaf([0.0, 0.0]), tape.leaf([0.0, 0.0]), tape.leaf([0.0] * 3), self._switch_params(tape, bias=50.0)
        )
        assert p.item() == pytest.approx(1.0 - P_GEN_FLOOR, abs=1e-15)

    def test_switch_hand_sized_instance(self):
        tape = Tape()
        c, s, y = np.array([0.1, 0.2]), np.array([-0.3, 0.4]), np.array([1.0, 0.0, -1.0])
        switch = self._switch_params(tape, bias=0.2, scale=0.5)
        p = generation_probability(tape.leaf(c), tape.leaf(s), tape.leaf(y), switch)
        z = 0.5 * (c.sum() + s.sum() + y.sum()) + 0.2
        assert p.item() == pytest.approx(1.0 / (1.0 + np.exp(-z)), abs=1e-12)

    def test_final_distribution_worked_example(self):
        tape = Tape()
        p_final = final_distribution(
            tape.leaf([0.5, 0.3, 0.2]), tape.leaf([0.6]), tape.leaf([0.7, 0.3]), [1, 3], 4
        )
        np.testing.assert_allclose(p_final.values, [0.30, 0.46, 0.12, 0.12], rtol=0, atol=1e-12)

    def test_final_distribution_endpoints(self):
        tape = Tape()
        p_vocab, alpha = tape.leaf([0.5, 0.3, 0.2]), tape.leaf([0.7, 0.3])
        high = final_distribution(p_vocab, tape.leaf([1.0 - P_GEN_FLOOR]), alpha, [1, 3], 4).values
        low = final_distribution(p_vocab, tape.leaf([P_GEN_FLOOR]), alpha, [1, 3], 4).values
        assert high[3] <= 1e-6
        np.testing.assert_allclose(high[:3], [0.5, 0.3, 0.2], atol=1e-6)
        assert low[0] + low[2] <= 1e-6
        np.testing.assert_allclose(low[[1, 3]], [0.7, 0.3], atol=1e-6)


class TestDecoderStep:
    """Test one decoder step end to end"""

    def _step(self, tiny_config, tiny_params, example, prev=BOS):
        tape = Tape(grad_enabled=False)
        weights = tiny_params.on_tape(tape)
        enc = encode(example.src_ids, weights, tiny_config, example.mask)
        return decoder_step(prev, initial_state(tape, tiny_config), enc, weights, example, tiny_config)

    def test_first_step_invariants(self, tiny_config, tiny_params, toy_example):
        out, state = self._step(tiny_config, tiny_params, toy_example)
        assert abs(out.alpha_t.values.sum() - 1.0) <= 1e-9
        assert abs(out.p_vocab.values.sum() - 1.0) <= 1e-9
        assert abs(out.p_final.values.sum() - 1.0) <= 1e-9
        assert out.p_final.shape == (toy_example.ext_size,)
        assert 0.0 < out.p_gen_value < 1.0
        np.testing.assert_array_equal(state.context.values, out.c_t.values)

    def test_identical_calls_identical_outputs(self, tiny_config, tiny_params, toy_example):
        a, _ = self._step(tiny_config, tiny_params, toy_example)
        b, _ = self._step(tiny_config, tiny_params, toy_example)
        np.testing.assert_array_equal(a.p_final.values, b.p_final.values)

    def test_oov_input_rejected(self, tiny_config, tiny_params, toy_example):
        with pytest.raises(ContractError):
            self._step(tiny_config, tiny_params, toy_example, prev=tiny_config.vocab_size)

    def check_random_steps(self, tiny_config, toy_vocab, rng, n_steps):
        words = ["alpha", "beta", "gamma", "zeta", "eta", "theta"]
        checked, trial = 0, 0
        while checked < n_steps:
            params = init_params(tiny_config.model_copy(update={"seed": trial}))
            src = " ".join(rng.choice(words, size=int(rng.integers(1, 6))))
            tgt = " ".join(rng.choice(words, size=int(rng.integers(1, 5))))
            ex = encode_example(src, tgt, toy_vocab)
            tape = Tape(grad_enabled=False)
            for step in teacher_forced_steps(ex, params.on_tape(tape), tiny_config):
                assert abs(step.alpha_t.values.sum() - 1.0) <= 1e-9
                assert abs(step.p_vocab.values.sum() - 1.0) <= 1e-9
                assert abs(step.p_final.values.sum() - 1.0) <= 1e-9
                assert np.all(np.isfinite(step.c_t.values))
                checked += 1
            trial += 1

    def test_random_steps_are_distributions(self, tiny_config, toy_vocab, rng):
        self.check_random_steps(tiny_config, toy_vocab, rng, 100)

    @pytest.mark.slow
    def test_thousand_random_steps_are_distributions(self, tiny_config, toy_vocab, rng):
        self.check_random_steps(tiny_config, toy_vocab, rng, 1000)

    def test_low_switch_leaves_no_mass_on_vocab_only_words(self, tiny_config, tiny_params, toy_example):
        params = tiny_params.copy()
        params.tensors["switch.bias"] = np.array([-200.0])
        tape = Tape(grad_enabled=False)
        for step in teacher_forced_steps(toy_example, params.on_tape(tape), tiny_config):
            vocab_only = [w for w in range(tiny_config.vocab_size) if w not in toy_example.src_ext_ids]
            assert step.p_final.values[vocab_only].sum() <= 1e-6

    def test_teacher_forcing_length(self, tiny_config, tiny_params, toy_example):
        steps = teacher_forced_steps(toy_example, tiny_params.on_tape(Tape()), tiny_config)
        assert len(steps) == toy_example.n_steps == 4


class TestGradientCheck:
    """Test the full training loss against finite differences"""

    @pytest.mark.parametrize("mode", list(CopyMode))
    def test_toy_loss_passes(self, mode):
        report = grad_check_toy(seed=7, mode=mode)
        assert report.n_checked == 200
        assert report.passed, report
