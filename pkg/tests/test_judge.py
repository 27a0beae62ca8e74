import random
import threading

import pytest

from tagrec.errors import ValidationError
from tagrec.gateway import Task
from tagrec.judge import (DEFAULT_SCHEMAS, JudgeBuffer, JudgeSample,
                          QualityVerdict, RebalanceConfig, RuleJudge,
                          agreement, drift_check, judge_sample, make_verdict,
                          rebalance, verdict_pass)


def sample(sample_id="s1", task=Task.TAG_PREDICTION, payload=None, round=0):
    return JudgeSample(sample_id=sample_id, task=task,
                       payload=payload or {}, round=round,
                       created_at=float(round) + 1.0)


def tag_verdict(passed: bool) -> QualityVerdict:
    label = "Yes" if passed else "No"
    return make_verdict(DEFAULT_SCHEMAS[Task.TAG_PREDICTION],
                        {"relevance": label, "consistency": "Yes",
                         "specificity": "Yes", "validity": "Yes"})


# -- verdicts ------------------------------------------------------------------


def test_all_yes_passes():
    verdict = make_verdict(DEFAULT_SCHEMAS[Task.TAG_PREDICTION],
                           {"relevance": "Yes", "consistency": "Yes",
                            "specificity": "Yes", "validity": "Yes"})
    assert verdict.passed


def test_one_bad_fails_multi_level():
    verdict = make_verdict(DEFAULT_SCHEMAS[Task.EXPLANATION],
                           {"relevance": "Excellent", "factuality": "Good",
                            "clarity": "Bad", "safety": "Good"})
    assert not verdict.passed


def test_good_and_excellent_both_pass():
    verdict = make_verdict(DEFAULT_SCHEMAS[Task.EXPLANATION],
                           {"relevance": "Excellent", "factuality": "Good",
                            "clarity": "Good", "safety": "Excellent"})
    assert verdict.passed


def test_pass_bit_recomputable_from_labels():
    rng = random.Random(4)
    schemas = DEFAULT_SCHEMAS[Task.EXPLANATION]
    for _ in range(100):
        criteria = {s.name: rng.choice(s.labels) for s in schemas}
        verdict = make_verdict(schemas, criteria)
        assert verdict.passed == verdict_pass(schemas, criteria)


def test_unknown_label_rejected():
    with pytest.raises(ValidationError):
        make_verdict(DEFAULT_SCHEMAS[Task.TAG_PREDICTION],
                     {"relevance": "Maybe", "consistency": "Yes",
                      "specificity": "Yes", "validity": "Yes"})


def test_missing_criterion_rejected():
    with pytest.raises(ValidationError):
        make_verdict(DEFAULT_SCHEMAS[Task.TAG_PREDICTION], {"relevance": "Yes"})


# -- rule judge fixtures ------------------------------------------------------------


def test_rule_judge_interest_strong_spontaneous():
    verdict = judge_sample(
        sample(task=Task.INTEREST_MINING, payload={
            "interest": "tennis",
            "reason": "User purchased a tennis racket",
            "context": "2025-06(purchase) | graphite tennis racket",
        }),
        DEFAULT_SCHEMAS[Task.INTEREST_MINING], RuleJudge())
    assert verdict.criteria == {"willingness": "spontaneity",
                                "reasonableness": "strong"}
    assert verdict.passed


def test_rule_judge_interest_hallucination():
    verdict = judge_sample(
        sample(task=Task.INTEREST_MINING, payload={
            "interest": "Smart home",
            "reason": "User purchased smart home accessories",
            "context": "2025-06(purchase) | retro wall clock",
        }),
        DEFAULT_SCHEMAS[Task.INTEREST_MINING], RuleJudge())
    assert verdict.criteria["reasonableness"] == "hallucination"
    assert not verdict.passed


def test_rule_judge_interest_weak_correlation():
    verdict = judge_sample(
        sample(task=Task.INTEREST_MINING, payload={
            "interest": "Yoga",
            "reason": "Purchases include yoga pants",
            "context": "2025-06(purchase) | stretch yoga pants",
        }),
        DEFAULT_SCHEMAS[Task.INTEREST_MINING], RuleJudge())
    assert verdict.criteria["reasonableness"] == "weak"
    assert not verdict.passed


def test_rule_judge_interest_necessity():
    verdict = judge_sample(
        sample(task=Task.INTEREST_MINING, payload={
            "interest": "Purchasing household necessities",
            "reason": "Most purchases are daily cleaning items",
            "context": "2025-06(purchase) | lemon cleaning spray",
        }),
        DEFAULT_SCHEMAS[Task.INTEREST_MINING], RuleJudge())
    assert verdict.criteria["willingness"] == "necessity"
    assert not verdict.passed


def test_rule_judge_tag_broad_term():
    verdict = judge_sample(
        sample(payload={
            "tag": "Mountaineering outdoor sports equipment",
            "interest": "outdoor travel",
            "context": "waterproof hiking tent",
            "profile_labels": ["outdoor travel"],
        }),
        DEFAULT_SCHEMAS[Task.TAG_PREDICTION], RuleJudge())
    assert verdict.criteria["specificity"] == "No"
    assert not verdict.passed


def test_rule_judge_tag_weak_relevance():
    verdict = judge_sample(
        sample(payload={
            "tag": "Embroidery bird-and-flower pattern silk pillowcase",
            "interest": "Skincare",
            "context": "hydrating face serum",
            "profile_labels": ["Skincare"],
        }),
        DEFAULT_SCHEMAS[Task.TAG_PREDICTION], RuleJudge())
    assert verdict.criteria["relevance"] == "No"


def test_rule_judge_tag_validity_flag_passthrough():
    verdict = judge_sample(
        sample(payload={"tag": "smart coaster gadget", "interest": "cooking",
                        "context": "copper skillet", "valid": False}),
        DEFAULT_SCHEMAS[Task.TAG_PREDICTION], RuleJudge())
    assert verdict.criteria["validity"] == "No"


def test_rule_judge_explanation_accept():
    verdict = judge_sample(
        sample(task=Task.EXPLANATION, payload={
            "explanation": "Roam mountains rivers backpack journey",
            "interest": "outdoor travel",
            "title": "waterproof backpack",
        }),
        DEFAULT_SCHEMAS[Task.EXPLANATION], RuleJudge())
    assert verdict.criteria["relevance"] == "Good"
    assert verdict.criteria["safety"] == "Good"


def test_rule_judge_explanation_privacy_hard_sell():
    verdict = judge_sample(
        sample(task=Task.EXPLANATION, payload={
            "explanation": "MsZhang time-limited offer bag quick buy",
            "interest": "outdoor travel",
            "title": "waterproof backpack",
        }),
        DEFAULT_SCHEMAS[Task.EXPLANATION], RuleJudge())
    assert verdict.criteria["safety"] == "Bad"
    assert not verdict.passed


def test_rule_judge_explanation_exaggeration():
    verdict = judge_sample(
        sample(task=Task.EXPLANATION, payload={
            "explanation": "Bag cutproof fireproof lasts forever",
            "interest": "outdoor travel",
            "title": "waterproof backpack",
        }),
        DEFAULT_SCHEMAS[Task.EXPLANATION], RuleJudge())
    assert verdict.criteria["factuality"] == "Bad"


def test_rule_judge_explanation_repetition():
    verdict = judge_sample(
        sample(task=Task.EXPLANATION, payload={
            "explanation": "Bag bag good bag buy bag good",
            "interest": "outdoor travel",
            "title": "bag",
        }),
        DEFAULT_SCHEMAS[Task.EXPLANATION], RuleJudge())
    assert verdict.criteria["clarity"] == "Bad"


class NoneProvider:
    def evaluate(self, sample, schemas):
        return None


def test_unparseable_judge_output_returns_none():
    assert judge_sample(sample(), DEFAULT_SCHEMAS[Task.TAG_PREDICTION],
                        NoneProvider()) is None


# -- buffer --------------------------------------------------------------------------


def test_buffer_round_trip_and_latest_wins(tmp_path):
    buffer = JudgeBuffer(tmp_path / "buffer.jsonl")
    buffer.enqueue(sample("s1"))
    first = tag_verdict(True)
    second = tag_verdict(False)
    buffer.record_human_verdict("s1", first)
    buffer.record_human_verdict("s1", second)
    assert buffer.get("s1").human_verdict == second
    assert buffer.history("s1", "human") == [first, second]
    reopened = JudgeBuffer(tmp_path / "buffer.jsonl")
    assert reopened.get("s1").human_verdict == second
    assert len(reopened.history("s1", "human")) == 2


def test_buffer_unknown_sample_rejected(tmp_path):
    buffer = JudgeBuffer(tmp_path / "buffer.jsonl")
    with pytest.raises(ValidationError):
        buffer.record_human_verdict("ghost", tag_verdict(True))


def test_buffer_pending_oldest_first(tmp_path):
    buffer = JudgeBuffer(tmp_path / "buffer.jsonl")
    for i in (3, 1, 2):
        buffer.enqueue(sample(f"s{i}", round=i))
    pending = buffer.pending_human()
    assert [s.sample_id for s in pending] == ["s1", "s2", "s3"]
    buffer.record_human_verdict("s1", tag_verdict(True))
    assert [s.sample_id for s in buffer.pending_human()] == ["s2", "s3"]
    assert [s.sample_id for s in buffer.pending_human(limit=1)] == ["s2"]


def test_buffer_concurrent_enqueue_disjoint(tmp_path):
    buffer = JudgeBuffer(tmp_path / "buffer.jsonl")

    def enqueue(start):
        for i in range(start, start + 25):
            buffer.enqueue(sample(f"s{i}"))

    threads = [threading.Thread(target=enqueue, args=(base,))
               for base in (0, 25, 50, 75)]
    for t in threads:
        t.start()
    for t in threads:
        t.join()
    assert {s.sample_id for s in buffer.samples()} == {f"s{i}" for i in range(100)}


def test_buffer_history_append_only(tmp_path):
    buffer = JudgeBuffer(tmp_path / "buffer.jsonl")
    buffer.enqueue(sample("s1"))
    lengths = []
    for passed in (True, False, True):
        buffer.record_human_verdict("s1", tag_verdict(passed))
        lengths.append(len(buffer.history("s1", "human")))
    assert lengths == [1, 2, 3]


# -- rebalance -------------------------------------------------------------------------


def fill_buffer(tmp_path, spec):
    """spec: {round: (passes, fails)}"""
    buffer = JudgeBuffer(tmp_path / "buffer.jsonl")
    counter = 0
    for round_no, (passes, fails) in spec.items():
        for _ in range(passes):
            s = sample(f"p{counter}", round=round_no)
            buffer.enqueue(s)
            buffer.record_human_verdict(s.sample_id, tag_verdict(True))
            counter += 1
        for _ in range(fails):
            s = sample(f"f{counter}", round=round_no)
            buffer.enqueue(s)
            buffer.record_human_verdict(s.sample_id, tag_verdict(False))
            counter += 1
    return buffer


def test_rebalance_keeps_all_minority_and_hits_ratio(tmp_path):
    buffer = fill_buffer(tmp_path, {0: (90, 10), 1: (80, 20)})
    result = rebalance(buffer, RebalanceConfig(seed=1))
    chosen = result.samples
    fails = [s for s in chosen if not s.human_verdict.passed]
    passes = [s for s in chosen if s.human_verdict.passed]
    assert len(fails) == 30          # every minority sample, across rounds
    assert len(passes) == 30         # exact 1:1 target
    ids = [s.sample_id for s in chosen]
    assert len(ids) == len(set(ids))


def test_rebalance_recency_weighting_favors_recent(tmp_path):
    buffer = fill_buffer(tmp_path, {0: (100, 0), 1: (100, 10)})
    result = rebalance(buffer, RebalanceConfig(seed=5, half_life=1.0))
    passes = [s for s in result.samples if s.human_verdict.passed]
    recent = sum(1 for s in passes if s.round == 1)
    old = sum(1 for s in passes if s.round == 0)
    assert len(passes) == 10
    # Round-1 weight is 1.0, round-0 weight 0.5; expect a recent majority.
    assert recent > old


def test_rebalance_weighted_sampling_matches_oracle(tmp_path):
    """Independent oracle: re-run the exponential-key selection with the
    same seed and weights; the chosen majority ids must match."""
    import hashlib

    buffer = fill_buffer(tmp_path, {0: (40, 5), 1: (30, 5)})
    cfg = RebalanceConfig(seed=9, half_life=1.0)
    result = rebalance(buffer, cfg)
    labeled = [s for s in buffer.samples(Task.TAG_PREDICTION)
               if s.human_verdict is not None]
    majority = [s for s in labeled if s.human_verdict.passed]
    max_round = max(s.round for s in labeled)
    weights = [2.0 ** (-(max_round - s.round) / cfg.half_life) for s in majority]
    digest = int.from_bytes(
        hashlib.sha256(f"{cfg.seed}:{Task.TAG_PREDICTION.value}".encode()).digest()[:8],
        "big")
    rng = random.Random(digest)
    keyed = sorted(((rng.random() ** (1.0 / w), s) for w, s in zip(weights, majority)),
                   key=lambda p: p[0], reverse=True)
    expected = {s.sample_id for _, s in keyed[:10]}
    got = {s.sample_id for s in result.samples if s.human_verdict.passed}
    assert got == expected


def test_rebalance_balanced_input_identity(tmp_path):
    buffer = fill_buffer(tmp_path, {0: (15, 15)})
    result = rebalance(buffer, RebalanceConfig(seed=2))
    assert len(result.samples) == 30


def test_rebalance_empty_class_warns_not_fabricates(tmp_path):
    buffer = fill_buffer(tmp_path, {0: (12, 0)})
    result = rebalance(buffer, RebalanceConfig(seed=2))
    assert len(result.samples) == 12
    assert result.warnings


# -- agreement and drift ------------------------------------------------------------------


def test_agreement_hand_computed_fixture():
    pairs = ([(True, True)] * 8 + [(False, True)] * 2
             + [(True, False)] * 1 + [(False, False)] * 9)
    metrics = agreement(pairs)
    assert metrics.accuracy == pytest.approx(0.85)
    assert metrics.precision == pytest.approx(0.8)
    assert metrics.recall == pytest.approx(0.8889, abs=1e-4)
    assert metrics.f1 == pytest.approx(0.8421, abs=1e-4)


def test_agreement_perfect():
    metrics = agreement([(True, True)] * 5 + [(False, False)] * 5)
    assert metrics.accuracy == metrics.precision == metrics.recall == metrics.f1 == 1.0


def test_agreement_always_pass_llm_on_all_pass_humans():
    metrics = agreement([(True, True)] * 7)
    assert metrics.accuracy == 1.0
    assert metrics.recall == 1.0


def test_agreement_undefined_metrics_are_none():
    metrics = agreement([(False, False)] * 4)
    assert metrics.precision is None
    assert metrics.recall is None
    assert metrics.f1 is None
    assert metrics.accuracy == 1.0


def test_f1_identity_on_random_confusions():
    rng = random.Random(8)
    for _ in range(100):
        pairs = [(rng.random() < 0.5, rng.random() < 0.5) for _ in range(40)]
        metrics = agreement(pairs)
        if metrics.precision is None or metrics.recall is None:
            continue
        if metrics.precision + metrics.recall == 0:
            assert metrics.f1 is None
            continue
        expected = (2 * metrics.precision * metrics.recall
                    / (metrics.precision + metrics.recall))
        assert metrics.f1 == pytest.approx(expected, abs=1e-12)


def drift_metrics(acc, n=50):
    tp = round(acc * n)
    return agreement([(True, True)] * tp + [(True, False)] * (n - tp))


def test_drift_threshold_trips():
    report = drift_check(drift_metrics(0.85, 100), drift_metrics(0.93, 100),
                         delta=0.05)
    assert report.status == "retrain_required"


def test_drift_equal_metrics_ok():
    report = drift_check(drift_metrics(0.9, 100), drift_metrics(0.9, 100))
    assert report.status == "ok"


def test_drift_tiny_window_low_confidence():
    report = drift_check(agreement([(True, True)]), drift_metrics(0.9, 100))
    assert report.low_confidence
