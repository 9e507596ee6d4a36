import hashlib

import pytest
from hypothesis import given, settings, strategies as st

from hcblab.core import (
    EMPTY_DIGEST,
    GENESIS,
    HEADER_SIZE,
    Block,
    BlockHeader,
    CompactBlock,
    HcbBlock,
    Transaction,
    check_block,
    compute_body_hash,
    derive_short_id,
    make_block,
    nonce_order_ok,
    to_compact,
    to_hcb,
)
from helpers import tx

txs_strategy = st.lists(
    st.builds(
        Transaction,
        sender=st.integers(0, 2**60),
        nonce=st.integers(0, 2**32),
        max_fee=st.integers(10, 10**12),
        max_priority_fee=st.integers(0, 10),
        payload_seed=st.binary(max_size=64),
    ),
    max_size=12,
)


def test_short_id_is_hash_prefix():
    h = bytes(range(1, 33))
    assert derive_short_id(h) == bytes.fromhex("010203040506")


@given(st.binary(min_size=32, max_size=32))
def test_short_id_matches_slice_oracle(h):
    assert derive_short_id(h) == bytes(h[i] for i in range(6))


def test_shared_prefix_gives_equal_short_ids():
    a = bytes(6) + b"\x01" * 26
    b = bytes(6) + b"\x02" * 26
    assert derive_short_id(a) == derive_short_id(b)


def test_tx_hash_depends_on_every_field():
    base = Transaction(1, 2, 300, 4, b"x")
    variants = [
        Transaction(9, 2, 300, 4, b"x"),
        Transaction(1, 9, 300, 4, b"x"),
        Transaction(1, 2, 301, 4, b"x"),
        Transaction(1, 2, 300, 5, b"x"),
        Transaction(1, 2, 300, 4, b"y"),
    ]
    assert Transaction(1, 2, 300, 4, b"x").tx_hash == base.tx_hash
    assert len({v.tx_hash for v in variants} | {base.tx_hash}) == 6


def test_tx_hash_is_digest_of_encoding():
    t = tx(3, 7)
    assert t.tx_hash == hashlib.sha256(t.encode()).digest()


def test_effective_fee_never_exceeds_max_fee():
    t = Transaction(1, 0, 100, 30)
    assert t.effective_fee(50) == 80
    assert t.effective_fee(90) == 100
    assert t.effective_fee(0) == 30


def test_rejects_tip_above_max_fee():
    with pytest.raises(ValueError):
        Transaction(1, 0, 10, 11)


@given(txs_strategy)
def test_transaction_size_and_round_trip(txs):
    for t in txs:
        enc = t.encode()
        assert len(enc) == t.size_bytes >= 110
        back, end = Transaction.decode_from(enc)
        assert back == t and end == len(enc)


def test_body_hash_examples():
    a, b = tx(1, 0), tx(2, 0)
    assert compute_body_hash([]) == hashlib.sha256(b"").digest() == EMPTY_DIGEST
    assert compute_body_hash([a]) == hashlib.sha256(a.tx_hash).digest()
    assert compute_body_hash([a, b]) == hashlib.sha256(a.tx_hash + b.tx_hash).digest()
    assert compute_body_hash([a, b]) != compute_body_hash([b, a])


def test_header_is_120_bytes_and_round_trips():
    h = BlockHeader(5, bytes(32), bytes(range(32)), 7, 3, 123456, 42)
    enc = h.encode()
    assert len(enc) == HEADER_SIZE == 120
    assert BlockHeader.decode_from(enc) == (h, 120)


@given(txs_strategy)
@settings(max_examples=50)
def test_block_round_trip_and_size(txs):
    block = make_block(GENESIS, txs, 1, 1000)
    enc = block.encode()
    assert len(enc) == block.serialized_size()
    assert Block.decode(enc) == block
    assert block.header.body_hash == compute_body_hash(txs)


def test_check_block_detects_tamper_and_nonce_order():
    good = make_block(GENESIS, [tx(1, 0), tx(1, 1)], 1, 0)
    check_block(good)
    with pytest.raises(ValueError):
        check_block(Block(good.header, good.body[:1]))
    bad = make_block(GENESIS, [tx(1, 1), tx(1, 0)], 1, 0)
    assert not nonce_order_ok(bad.body)
    with pytest.raises(ValueError):
        check_block(bad)


def test_to_compact_examples():
    assert to_compact(make_block(GENESIS, [], 1, 0)).entries == ()
    body = [tx(1, 0), tx(2, 0), tx(3, 0)]
    cb = to_compact(make_block(GENESIS, body, 1, 0))
    assert cb.entries == tuple(t.tx_hash[:6] for t in body)


def test_compact_of_200_txs_is_under_2kb():
    block = make_block(GENESIS, [tx(i, 0) for i in range(200)], 1, 0)
    cb = to_compact(block)
    assert cb.serialized_size() == HEADER_SIZE + 8 + 6 * 200 < 2048
    assert len(cb.encode()) == cb.serialized_size()


def test_to_hcb_examples():
    body = [tx(1, 0), tx(2, 0), tx(3, 0)]
    block = make_block(GENESIS, body, 1, 0)
    h = to_hcb(block, [True, False, False])
    assert h.entries[0] == body[0]
    assert h.entries[1:] == (body[1].short_id, body[2].short_id)
    none = to_hcb(block, [False] * 3)
    assert none.entries == to_compact(block).entries
    assert none.encode() == to_compact(block).encode()
    full = to_hcb(block, [True] * 3)
    assert full.entries == tuple(body)
    with pytest.raises(ValueError):
        to_hcb(block, [True])


@given(txs_strategy.filter(lambda b: len(b) > 0), st.data())
@settings(max_examples=50)
def test_entries_blocks_sizes_and_round_trip(body, data):
    block = make_block(GENESIS, body, 1, 0)
    flags = data.draw(st.lists(st.booleans(), min_size=len(body), max_size=len(body)))
    h = to_hcb(block, flags)
    c = to_compact(block)
    assert len(h.encode()) == h.serialized_size()
    assert HcbBlock.decode(h.encode()) == h
    assert CompactBlock.decode(c.encode()) == c
    # only strictly larger once at least one full entry is carried
    assert c.serialized_size() <= h.serialized_size()
    if any(flags):
        assert c.serialized_size() < h.serialized_size()
    assert h.serialized_size() <= block.serialized_size() + 8 * len(body) + 8


def test_compact_decode_rejects_full_entries():
    block = make_block(GENESIS, [tx(1, 0)], 1, 0)
    with pytest.raises(ValueError):
        CompactBlock.decode(to_hcb(block, [True]).encode())


def test_short_ids_deterministic_on_corpus():
    corpus = [tx(i % 97, i // 97, tag=i) for i in range(10_000)]
    first = [t.short_id for t in corpus]
    again = [tx(i % 97, i // 97, tag=i).short_id for i in range(10_000)]
    assert first == again
