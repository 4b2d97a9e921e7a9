import itertools

import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st

from diffwm.codec import (
    ber,
    bit_confidence,
    decode_bits,
    encode_indices,
    format_bits,
    logits_to_bits,
    parse_bits,
    random_bits,
)


def test_encode_examples():
    assert encode_indices(torch.tensor([0, 1, 1, 0])).tolist() == [0, 5, 6, 3]
    assert encode_indices(torch.zeros(6, dtype=torch.long)).tolist() == list(range(6))
    assert encode_indices(torch.ones(6, dtype=torch.long)).tolist() == list(range(6, 12))


def test_decode_examples():
    assert decode_bits(torch.tensor([0, 5, 6, 3])).tolist() == [0, 1, 1, 0]
    assert decode_bits(torch.arange(5)).tolist() == [0] * 5
    with pytest.raises(ValueError, match="position"):
        decode_bits(torch.tensor([2, 1, 2, 3]))


def test_rejects_non_binary():
    with pytest.raises(ValueError):
        encode_indices(torch.tensor([0, 2, 1]))


@pytest.mark.parametrize("L", range(1, 13))
def test_round_trip_exhaustive_small(L):
    words = torch.tensor(list(itertools.product([0, 1], repeat=L)))
    idx = encode_indices(words)
    assert torch.equal(decode_bits(idx), words)
    # every index is a valid positional pair
    off = idx - torch.arange(L)
    assert torch.all((off == 0) | (off == L))


@settings(max_examples=200, deadline=None)
@given(st.lists(st.integers(0, 1), min_size=1, max_size=200))
def test_round_trip_property(bits):
    w = torch.tensor(bits)
    assert torch.equal(decode_bits(encode_indices(w)), w)


def test_logits_examples():
    L = 4
    logits = torch.zeros(L, 2 * L)
    for i in range(L):
        logits[i, i], logits[i, i + L] = 5.0, 1.0
    assert logits_to_bits(logits).tolist() == [0] * L
    assert logits_to_bits(torch.full((L, 2 * L), 0.7)).tolist() == [0] * L  # ties decode to 0
    w = torch.tensor([1, 0, 1, 1])
    onehot = torch.nn.functional.one_hot(encode_indices(w), 2 * L).float()
    assert torch.equal(logits_to_bits(onehot), w)


def test_logits_non_finite_rejected():
    logits = torch.zeros(3, 6)
    logits[1, 2] = float("nan")
    with pytest.raises(ValueError):
        logits_to_bits(logits)


@settings(max_examples=100, deadline=None)
@given(seed=st.integers(0, 10_000), shift=st.floats(-50, 50), scale=st.floats(0.01, 100))
def test_logits_row_invariance(seed, shift, scale):
    g = torch.Generator().manual_seed(seed)
    logits = torch.randn(8, 16, generator=g, dtype=torch.float64)
    base = logits_to_bits(logits)
    assert torch.equal(logits_to_bits(logits + shift), base)
    assert torch.equal(logits_to_bits(logits * scale), base)


def test_confidence_is_two_class_probability():
    logits = torch.zeros(2, 4)
    logits[0, 0] = 2.0  # position 0 favours bit 0
    logits[1, 3] = 1.0  # position 1 favours bit 1
    conf = bit_confidence(logits)
    assert conf[0] == pytest.approx(torch.sigmoid(torch.tensor(2.0)).item())
    assert conf[1] == pytest.approx(torch.sigmoid(torch.tensor(1.0)).item())


def test_ber_examples():
    w = torch.tensor([0, 1, 1, 0])
    assert ber(w, w) == 0.0
    assert ber(torch.tensor([1, 1, 1, 0]), w) == 25.0
    assert ber(1 - w, w) == 100.0
    with pytest.raises(ValueError):
        ber(torch.tensor([0, 1]), w)


@settings(max_examples=100, deadline=None)
@given(st.integers(1, 64).flatmap(lambda n: st.tuples(st.lists(st.integers(0, 1), min_size=n, max_size=n),
                                                     st.lists(st.integers(0, 1), min_size=n, max_size=n))))
def test_ber_properties(pair):
    a, b = torch.tensor(pair[0]), torch.tensor(pair[1])
    assert ber(a, a) == 0.0
    assert ber(a, b) == ber(b, a)
    assert 0.0 <= ber(a, b) <= 100.0


def test_batched_ber():
    w = torch.tensor([[0, 0], [1, 1]])
    assert ber(torch.tensor([[0, 1], [1, 1]]), w).tolist() == [50.0, 0.0]


def test_text_formats():
    w = parse_bits("0110", L=4)
    assert w.tolist() == [0, 1, 1, 0]
    assert format_bits(w) == "0110"
    with pytest.raises(ValueError, match="expected L=5"):
        parse_bits("0110", L=5)
    with pytest.raises(ValueError):
        parse_bits("01a0")
    assert torch.equal(random_bits(16, seed=4), random_bits(16, seed=4))
    assert random_bits(16, seed=4, n=3).shape == (3, 16)
