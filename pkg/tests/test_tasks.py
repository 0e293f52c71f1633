import json

import numpy as np
import pytest
from hypothesis import given, strategies as st

from paint_lab.masking import extract_anchors
from paint_lab.tasks import (
    BaseSpec, DatasetSpec, SyntheticTask, build_base_policy, evaluate_chain, fit_ngram, generate_dataset,
    load_dataset, make_task, pretraining_corpus, save_dataset, toy_vocab, verify_task,
)


@pytest.fixture(scope="module")
def vocab():
    return toy_vocab()


class TestChains:
    @pytest.mark.parametrize("prompt,modulus,expected", [
        ("3+4*2", 10, [7, 4]),
        ("9*9", 10, [1]),
        ("5+5+5", 7, [3, 1]),
        ("0*7+2", 10, [0, 2]),
    ])
    def test_evaluate(self, prompt, modulus, expected):
        assert evaluate_chain(prompt, modulus) == expected

    def test_reference_format(self, vocab):
        t = make_task(0, "3+4*2", 10, vocab)
        assert t.reference_text == "74#4" and t.answer == "4"
        assert t.reference_tokens[-1] == vocab.eos_id
        assert vocab.decode(t.reference_tokens[:-1]) == "74#4"

    def test_anchors_follow_results(self, vocab):
        t = make_task(1, "2*6+9", 10, vocab)  # 2, 1 -> "21#1"
        assert t.reference_text == "21#1"
        assert extract_anchors(t.reference).anchors == ("1", "21")

    @given(st.integers(0, 2**31 - 1))
    def test_generated_tasks_verify(self, seed):
        for t in generate_dataset(DatasetSpec(n_tasks=5, seed=seed)):
            verify_task(t, 10, toy_vocab())
            ops = (len(t.prompt) - 1) // 2
            assert 1 <= ops <= 3 and len(t.reference_text) == ops + 2


class TestVerify:
    def test_rejects_wrong_derivation(self, vocab):
        t = make_task(0, "3+4", 10, vocab)
        bad = SyntheticTask(t.id, t.prompt, "8#8", vocab.encode("8#8") + (vocab.eos_id,), "8")
        with pytest.raises(ValueError, match="derivation"):
            verify_task(bad, 10, vocab)

    def test_rejects_answer_mismatch(self, vocab):
        t = make_task(0, "3+4", 10, vocab)
        bad = SyntheticTask(t.id, t.prompt, t.reference_text, t.reference_tokens, "3")
        with pytest.raises(ValueError, match="answer"):
            verify_task(bad, 10, vocab)

    def test_rejects_token_mismatch(self, vocab):
        t = make_task(0, "3+4", 10, vocab)
        bad = SyntheticTask(t.id, t.prompt, t.reference_text, t.reference_tokens[:-1], t.answer)
        with pytest.raises(ValueError, match="tokens"):
            verify_task(bad, 10, vocab)

    @pytest.mark.parametrize("kw", [{"n_tasks": 0}, {"modulus": 11}, {"modulus": 1}, {"max_chain": 0}])
    def test_spec_validation(self, kw):
        with pytest.raises(ValueError):
            DatasetSpec(**kw)


class TestDatasetIO:
    def test_deterministic(self):
        a = generate_dataset(DatasetSpec(n_tasks=30, seed=4))
        b = generate_dataset(DatasetSpec(n_tasks=30, seed=4))
        c = generate_dataset(DatasetSpec(n_tasks=30, seed=5))
        assert a == b and a != c

    def test_round_trip(self, tmp_path):
        tasks = generate_dataset(DatasetSpec(n_tasks=20, seed=1))
        path = tmp_path / "d.jsonl"
        save_dataset(tasks, path)
        assert load_dataset(path) == tasks
        assert len(path.read_text().splitlines()) == 20

    def test_load_error_names_line(self, tmp_path):
        tasks = generate_dataset(DatasetSpec(n_tasks=3))
        path = tmp_path / "d.jsonl"
        lines = [t.to_json() for t in tasks]
        lines[1] = json.dumps({"id": "x", "prompt": "1+1"})
        path.write_text("\n".join(lines) + "\n")
        with pytest.raises(ValueError, match=r"d\.jsonl:2: .*missing"):
            load_dataset(path)

    def test_load_bad_json(self, tmp_path):
        path = tmp_path / "d.jsonl"
        path.write_text("\n{not json\n")
        with pytest.raises(ValueError, match=r"d\.jsonl:2:"):
            load_dataset(path)


class TestBasePolicy:
    def test_noise_free_corpus_is_correct(self, vocab):
        for seq, plen in pretraining_corpus(BaseSpec(noise=0.0, corpus_size=50), 10, 3, vocab):
            prompt = vocab.decode(seq[:plen])
            t = make_task(0, prompt, 10, vocab)
            assert tuple(seq[plen:]) == t.reference_tokens

    def test_ngram_counts(self, vocab):
        seq = vocab.encode("1+2") + vocab.encode("3#3") + (vocab.eos_id,)
        pol = fit_ngram([(seq, 3)], vocab, 1, 0.5)
        row = np.exp(pol.row(pol.key(vocab.encode("1+23"))))
        # context "3" is followed once by "#" and once by eos
        expected = np.full(vocab.size, 0.5 / (2 + 0.5 * vocab.size))
        expected[[vocab.id("#"), vocab.eos_id]] = 1.5 / (2 + 0.5 * vocab.size)
        assert np.allclose(row, expected, atol=1e-15)

    def test_rows_normalized_and_deterministic(self, vocab):
        spec = BaseSpec(corpus_size=300, seed=2)
        a, b = build_base_policy(spec, vocab, 2), build_base_policy(spec, vocab, 2)
        assert a.checksum() == b.checksum()
        for row in a.logits.values():
            assert np.exp(row).sum() == pytest.approx(1.0, abs=1e-12)

    def test_uniform(self, vocab):
        assert build_base_policy(BaseSpec(kind="uniform"), vocab, 3).logits == {}

    @pytest.mark.parametrize("kw", [{"kind": "lstm"}, {"noise": 1.5}, {"smoothing": 0.0}, {"corpus_size": -1}])
    def test_spec_validation(self, kw):
        with pytest.raises(ValueError):
            BaseSpec(**kw)
