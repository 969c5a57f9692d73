import json
import re

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from cellevo.encoding import (
    Activation,
    Architecture,
    Block,
    BlockKind,
    Combination,
    CycleDetected,
    ParseError,
    ValidationError,
    block_count,
    deserialize,
    encode_basic_rnn,
    encode_gru,
    encode_lstm,
    new_base_architecture,
    serialize,
    structural_key,
    to_dot,
    topological_order,
    validate,
)
from cellevo.morphism import IdentifierPool, random_initial_architecture

SEEDS = [encode_basic_rnn, encode_lstm, encode_gru]


class FixedRng:
    """Returns queued integers from ``integers``; enough for new_base_architecture."""

    def __init__(self, *values):
        self.values = list(values)

    def integers(self, n):
        return self.values.pop(0)


def kinds(arch, kind):
    return [b for b in arch.blocks.values() if b.kind is kind]


def test_base_architecture_with_add_and_tanh():
    arch = new_base_architecture(FixedRng(0, 4))
    assert block_count(arch) == 10
    assert validate(arch).ok
    assert arch[7].combination is Combination.ADD
    assert arch[8].activation is Activation.TANH


@pytest.mark.parametrize("seed", range(20))
def test_base_architecture_shape(seed):
    arch = new_base_architecture(np.random.default_rng(seed))
    assert len(kinds(arch, BlockKind.COMBINATION)) == 1
    assert len(kinds(arch, BlockKind.ACTIVATION)) == 4
    assert arch[arch.c_next_id].inputs == (6,)
    assert arch[arch.h_next_id].inputs == (8,)
    assert [arch[i].activation for i in (4, 5, 6)] == [Activation.LINEAR] * 3


def test_block_count_anchors():
    assert block_count(encode_lstm()) == 26
    assert block_count(encode_gru()) == 23
    assert block_count(encode_basic_rnn()) == 10


def test_basic_rnn_layout():
    arch = encode_basic_rnn()
    assert validate(arch).ok
    combs = kinds(arch, BlockKind.COMBINATION)
    assert [c.combination for c in combs] == [Combination.ADD]
    feeder = arch[arch[arch.h_next_id].inputs[0]]
    assert feeder.activation is Activation.TANH


def test_lstm_reads_previous_cell_state():
    arch = encode_lstm()
    assert arch.consumers(arch.c_id)


def test_gru_h_path_ignores_cell_state():
    arch = encode_gru()
    consumers = arch.consumers(arch.c_id)
    assert consumers == [arch.c_next_id]


@pytest.mark.parametrize("encode", SEEDS)
def test_seeds_validate(encode):
    assert validate(encode()).ok


def test_output_without_input():
    arch = encode_basic_rnn()
    blocks = dict(arch.blocks)
    blocks[9] = Block(9, BlockKind.OUTPUT_H, ())
    report = validate(Architecture(blocks, "broken_0"))
    assert "output-without-input" in report.rules
    assert any(v.block_id == 9 for v in report.violations)


def test_hidden_state_unused():
    arch = encode_basic_rnn()
    blocks = dict(arch.blocks)
    # h projection reads c instead; h is now read by nobody.
    blocks[5] = Block(5, BlockKind.ACTIVATION, (3,), activation=Activation.LINEAR_B)
    report = validate(Architecture(blocks, "broken_0"))
    assert report.rules == {"hidden-state-unused"}


def test_dangling_block_reported():
    arch = encode_basic_rnn()
    blocks = dict(arch.blocks)
    blocks[11] = Block(11, BlockKind.ACTIVATION, (7,), activation=Activation.RELU)
    report = validate(Architecture(blocks, "broken_0"))
    assert report.rules == {"dangling-block"}


def test_nonprojection_reading_x_is_invalid():
    arch = encode_basic_rnn()
    blocks = dict(arch.blocks)
    blocks[4] = Block(4, BlockKind.ACTIVATION, (1,), activation=Activation.TANH)
    assert "x-consumer-not-projection" in validate(Architecture(blocks, "broken_0")).rules


def test_path_from_h_to_h_next_not_required():
    # h feeds only c_next; h_next is driven from x alone.
    blocks = [
        Block(1, BlockKind.INPUT_X),
        Block(2, BlockKind.INPUT_H),
        Block(3, BlockKind.INPUT_C),
        Block(4, BlockKind.ACTIVATION, (1,), activation=Activation.LINEAR),
        Block(5, BlockKind.ACTIVATION, (2,), activation=Activation.TANH),
        Block(6, BlockKind.OUTPUT_H, (4,)),
        Block(7, BlockKind.OUTPUT_C, (5,)),
    ]
    assert validate(Architecture({b.id: b for b in blocks}, "odd_0")).ok


def test_validate_never_raises_on_garbage():
    blocks = {1: Block(1, BlockKind.COMBINATION, (1, 99))}
    report = validate(Architecture(blocks, "junk_0"))
    assert not report.ok
    assert {"self-reference", "dangling-reference", "io-block-count"} <= report.rules


def test_topological_order_basic_rnn():
    order = topological_order(encode_basic_rnn())
    pos = {b: i for i, b in enumerate(order)}
    assert pos[4] < pos[6] and pos[5] < pos[6] and pos[6] < pos[7]
    assert len(order) == 10


def test_topological_order_cycle():
    blocks = dict(encode_basic_rnn().blocks)
    blocks[6] = Block(6, BlockKind.COMBINATION, (7, 5), combination=Combination.ADD)
    loop = Architecture(blocks, "loop_0")
    with pytest.raises(CycleDetected):
        topological_order(loop)
    assert "cycle" in validate(loop).rules


def random_archs(seeds):
    pool = IdentifierPool()
    rng = np.random.default_rng(seeds)
    return [random_initial_architecture(rng, pool) for _ in range(10)]


@settings(max_examples=25, deadline=None)
@given(st.integers(0, 2**32 - 1))
def test_topological_order_is_a_linear_extension(seed):
    for arch in random_archs(seed) + [e() for e in SEEDS]:
        order = topological_order(arch)
        assert sorted(order) == sorted(arch.blocks)
        pos = {b: i for i, b in enumerate(order)}
        for b in arch.blocks.values():
            assert all(pos[i] < pos[b.id] for i in b.inputs)


def node_count(dot: str) -> int:
    return len(re.findall(r"^\s+\w+ \[label=", dot, flags=re.M))


def test_dot_basic_rnn():
    dot = to_dot(encode_basic_rnn())
    assert node_count(dot) == 10
    assert "add_6 -> tanh_7;" in dot
    assert dot.count("->") == sum(len(b.inputs) for b in encode_basic_rnn().blocks.values())


@pytest.mark.parametrize("encode", SEEDS)
def test_dot_node_count_matches_block_count(encode):
    arch = encode()
    assert node_count(to_dot(arch)) == block_count(arch)


@pytest.mark.parametrize("encode", SEEDS)
def test_serialize_round_trip(encode):
    arch = encode()
    back = deserialize(serialize(arch))
    assert back == arch
    assert back.identifier == arch.identifier


@settings(max_examples=25, deadline=None)
@given(st.integers(0, 2**32 - 1))
def test_serialize_round_trip_random(seed):
    for arch in random_archs(seed):
        assert deserialize(serialize(arch)) == arch


def test_truncated_document():
    text = serialize(encode_gru())
    with pytest.raises(ParseError) as err:
        deserialize(text[: len(text) // 2])
    assert "line" in err.value.location


def test_missing_field_location():
    doc = json.loads(serialize(encode_gru()))
    del doc["blocks"][3]["kind"]
    with pytest.raises(ParseError) as err:
        deserialize(json.dumps(doc))
    assert err.value.location == "$.blocks[3]"


def test_dangling_reference_document():
    doc = json.loads(serialize(encode_gru()))
    doc["blocks"][5]["inputs"] = [404]
    with pytest.raises(ValidationError) as err:
        deserialize(json.dumps(doc))
    assert "dangling-reference" in err.value.report.rules


def test_structural_key_ignores_ids_and_operand_order():
    a = encode_basic_rnn()
    blocks = {}
    for b in a.blocks.values():
        new_inputs = tuple(i + 100 for i in b.inputs)
        if b.kind is BlockKind.COMBINATION:
            new_inputs = new_inputs[::-1]
        blocks[b.id + 100] = Block(b.id + 100, b.kind, new_inputs, b.activation, b.combination)
    assert structural_key(Architecture(blocks, "other_0")) == structural_key(a)
    assert structural_key(encode_lstm()) != structural_key(encode_gru())
