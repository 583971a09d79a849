import numpy as np
import pytest

from _support import ScriptedLogits, random_prompt, toy_weights
from entropycache.decoding import (
    EOS_ID,
    DecodeConfig,
    SequenceState,
    active_window,
    decode_step,
    decode_tokens,
    encode_text,
    parse_token_list,
    run_generation,
)
from entropycache.errors import GenerationComplete
from entropycache.policy import BaselinePolicy, EntropyCachePolicy, StaticBlockPolicy


def state_with_masks(prompt_len, gen_len, masked_offsets):
    s = SequenceState.start(np.zeros(prompt_len, dtype=np.int64), gen_len, 256)
    s.masked[prompt_len:] = False
    s.masked[[prompt_len + m for m in masked_offsets]] = True
    return s


def logits_with_maxprob(maxprobs, vocab=16):
    """Rows whose softmax puts exactly ``q`` on token 0, the rest spread evenly."""
    rows = []
    for q in maxprobs:
        rest = (1 - q) / (vocab - 1)
        rows.append(np.log(np.r_[q, np.full(vocab - 1, rest)]))
    return np.array(rows, dtype=np.float32)


class TestWindow:
    def test_initial(self):
        s = SequenceState.start([1, 2, 3], 64, 256)
        assert active_window(s, DecodeConfig(window_size=32, gen_length=64)).tolist() == list(range(3, 35))

    def test_leftmost(self):
        s = state_with_masks(4, 16, [0, 1, 5, 9])
        assert (active_window(s, DecodeConfig(window_size=2, gen_length=16)) - 4).tolist() == [0, 1]

    def test_fewer_than_w(self):
        s = state_with_masks(4, 16, [3, 7, 11])
        assert (active_window(s, DecodeConfig(window_size=8, gen_length=16)) - 4).tolist() == [3, 7, 11]

    def test_complete(self):
        with pytest.raises(GenerationComplete):
            active_window(state_with_masks(4, 8, []), DecodeConfig(window_size=2, gen_length=8))


class TestDecodeStep:
    cfg = DecodeConfig(window_size=3, gen_length=8, confidence_threshold=0.9)

    def test_threshold_rule(self):
        s = SequenceState.start([1, 2], 8, 256)
        res = decode_step(s, self.cfg, logits_with_maxprob([0.95, 0.91, 0.4]))
        assert res.decoded.tolist() == [2, 3]

    def test_fallback(self):
        s = SequenceState.start([1, 2], 8, 256)
        res = decode_step(s, self.cfg, logits_with_maxprob([0.5, 0.6, 0.3]))
        assert res.decoded.tolist() == [3]

    def test_tie_lowest_position(self):
        s = SequenceState.start([1, 2], 8, 256)
        res = decode_step(s, self.cfg, np.zeros((3, 16), dtype=np.float32))
        assert res.decoded.tolist() == [2]
        assert res.probs.shape == (1, 16)

    def test_does_not_mutate_state(self):
        s = SequenceState.start([1, 2], 8, 256)
        before = s.tokens.copy()
        decode_step(s, self.cfg, logits_with_maxprob([0.95, 0.2, 0.2]))
        assert np.array_equal(s.tokens, before)

    def test_row_mismatch(self):
        s = SequenceState.start([1, 2], 8, 256)
        with pytest.raises(ValueError):
            decode_step(s, self.cfg, np.zeros((2, 16), dtype=np.float32))

    def test_bad_config(self):
        with pytest.raises(ValueError):
            DecodeConfig(window_size=0, gen_length=4)
        with pytest.raises(ValueError):
            DecodeConfig(window_size=2, gen_length=4, confidence_threshold=0.0)


class TestTokenizer:
    def test_roundtrip(self):
        assert decode_tokens(encode_text("héllo")) == "héllo"

    def test_specials_dropped(self):
        assert decode_tokens([104, 105, EOS_ID, 256]) == "hi"

    def test_id_list(self):
        assert parse_token_list("1, 2,3") == [1, 2, 3]


class TestRunGeneration:
    def setup_method(self):
        self.w = toy_weights(5)
        self.prompt = random_prompt(5, 16)

    def test_single_mask_one_step(self):
        for policy in (BaselinePolicy(), EntropyCachePolicy(), StaticBlockPolicy(32)):
            r = run_generation(self.w, self.prompt, DecodeConfig(window_size=1, gen_length=1), policy)
            assert r.steps == 1 and r.records[0].mode == "Full"

    def test_threshold_one_gives_n_steps(self):
        cfg = DecodeConfig(window_size=8, gen_length=24, confidence_threshold=1.0)
        r = run_generation(self.w, self.prompt, cfg, BaselinePolicy())
        assert r.steps == 24
        assert all(rec.decoded_count == 1 for rec in r.records)

    @pytest.mark.parametrize("policy_factory", [BaselinePolicy, EntropyCachePolicy, lambda: StaticBlockPolicy(8)])
    def test_invariants(self, policy_factory):
        cfg = DecodeConfig(window_size=8, gen_length=48)
        seen = []
        masks_before = []

        def observe(ctx):
            seen.append((ctx.window.copy(), ctx.decoded.copy(), ctx.state.tokens[:16].copy()))
            masks_before.append(ctx.state.mask_set.copy())

        r = run_generation(self.w, self.prompt, cfg, policy_factory(), observer=observe)
        assert r.records[0].mode == "Full"
        assert r.steps <= 48
        assert sum(rec.decoded_count for rec in r.records) == 48
        decoded_all = set()
        for window, decoded, prompt_now in seen:
            assert len(decoded) >= 1
            assert set(decoded.tolist()) <= set(window.tolist())
            assert not decoded_all & set(decoded.tolist())
            decoded_all |= set(decoded.tolist())
            assert np.array_equal(prompt_now, self.prompt)
        sizes = [len(m) for m in masks_before]
        assert all(a > b for a, b in zip(sizes, sizes[1:]))
        assert np.all(r.generated != 256)

    def test_static_block_partial_set_is_window(self):
        cfg = DecodeConfig(window_size=8, gen_length=32)
        plans = []
        # leftmost-first decoding, one token per step
        run_generation(self.w, self.prompt, cfg, StaticBlockPolicy(8), logit_hook=ScriptedLogits(lambda s: False),
                       observer=lambda ctx: plans.append((ctx.plan, ctx.window.copy())))
        for plan, window in plans:
            if plan.mode.value == "Partial":
                assert plan.recompute_set == tuple(window.tolist())
        full_steps = [i + 1 for i, (p, _) in enumerate(plans) if p.mode.value == "Full"]
        assert full_steps == [1, 9, 17, 25]

    def test_eos_stop(self):
        cfg = DecodeConfig(window_size=4, gen_length=16, eos_token_id=EOS_ID, eos_stop=True)

        def hook(step, window, logits):
            out = np.zeros_like(logits)
            out[:, EOS_ID if step >= 2 else 65] = 30.0
            return out

        r = run_generation(self.w, self.prompt, cfg, BaselinePolicy(), logit_hook=hook)
        assert r.steps == 2
        assert np.all(r.generated[4:] == EOS_ID) and r.records[1].eos_step

    def test_scripted_one_per_step(self):
        cfg = DecodeConfig(window_size=8, gen_length=20)
        ctl = ScriptedLogits(lambda s: s % 3 == 0)
        r = run_generation(self.w, self.prompt, cfg, EntropyCachePolicy(), logit_hook=ctl)
        assert r.steps == 20
        for rec in r.records:
            high = rec.step % 3 == 0
            assert rec.max_entropy == pytest.approx(ctl.entropy_of(high), abs=1e-5)

    def test_prompt_too_long(self):
        with pytest.raises(ValueError):
            run_generation(self.w, np.zeros(1020, dtype=np.int64), DecodeConfig(window_size=4, gen_length=8),
                           BaselinePolicy())
