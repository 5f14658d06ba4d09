import json
import threading
from http.server import BaseHTTPRequestHandler, HTTPServer

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from polarground.parsing import (
    D_TXT,
    DEFAULT_PROMPT,
    LlmClientConfig,
    LlmSchemaError,
    LlmTransportError,
    ParseError,
    ParsedInstruction,
    cosine,
    embed_text,
    normalize_action,
    parse_expression,
    parse_grammar,
    parse_llm,
    parse_relation_phrases,
    record_replay_entry,
    to_relation_tuples,
)


class TestEmbedText:
    def test_case_insensitive(self):
        np.testing.assert_array_equal(embed_text("left"), embed_text("LEFT"))

    def test_whitespace_insensitive(self):
        np.testing.assert_array_equal(
            embed_text("silver spoon"), embed_text("  silver   spoon ")
        )

    def test_unit_norm(self):
        assert np.linalg.norm(embed_text("silver spoon")) == pytest.approx(1.0, abs=1e-9)

    def test_shape(self):
        assert embed_text("red bowl").shape == (D_TXT,)

    def test_shared_token_similarity(self):
        red_bowl = embed_text("red bowl")
        assert cosine(red_bowl, embed_text("red box")) > cosine(
            red_bowl, embed_text("green ring")
        )

    def test_empty_rejected(self):
        with pytest.raises(ValueError):
            embed_text("")
        with pytest.raises(ValueError):
            embed_text("   ")
        with pytest.raises(ValueError):
            embed_text("!!!")

    @given(st.text(alphabet="abcdefgh ", min_size=1).filter(lambda s: s.strip()))
    @settings(max_examples=50, deadline=None)
    def test_determinism_and_norm(self, s):
        a = embed_text(s)
        b = embed_text(s)
        np.testing.assert_array_equal(a, b)
        assert np.linalg.norm(a) == pytest.approx(1.0, abs=1e-9)


class TestParseGrammar:
    def test_two_relations(self):
        parsed = parse_grammar(
            "put the cyan bowl above the chocolate and left of the silver spoon"
        )
        assert parsed.action == "put"
        assert parsed.source == "cyan bowl"
        assert parsed.targets == (("chocolate", "above"), ("silver spoon", "left"))

    def test_three_relations_with_commas(self):
        parsed = parse_grammar(
            "put the green ring to the left of the gray cube, the above of the "
            "gray cube, and the right of the red bowl."
        )
        assert parsed.action == "put"
        assert parsed.source == "green ring"
        assert parsed.targets == (
            ("gray cube", "left"),
            ("gray cube", "above"),
            ("red bowl", "right"),
        )

    def test_navigation_form_without_source(self):
        parsed = parse_grammar("move to the front of the red box and close to the tree")
        assert parsed.action == "move"
        assert parsed.source == "self"
        assert parsed.targets == (("red box", "front"), ("tree", "close"))

    def test_far_from_form(self):
        parsed = parse_grammar("move the blue cube far from the yellow ring")
        assert parsed.source == "blue cube"
        assert parsed.targets == (("yellow ring", "far"),)

    def test_diagonal_predicates(self):
        parsed = parse_grammar(
            "place the red bowl to the left above of the gray cube"
        )
        assert parsed.targets == (("gray cube", "left above"),)

    def test_unparseable_token_is_named(self):
        with pytest.raises(ParseError) as err:
            parse_grammar("frobnicate the bluh")
        assert "bluh" in str(err.value) or "no referring expression" in str(err.value)

    def test_error_positions(self):
        with pytest.raises(ParseError):
            parse_grammar("")
        with pytest.raises(ParseError):
            parse_grammar("put the cyan bowl somewhere the chocolate")
        with pytest.raises(ParseError):
            parse_grammar("put the cyan bowl above chocolate")

    def test_case_and_period_tolerated(self):
        parsed = parse_grammar("Put the Cyan Bowl above the Chocolate.")
        assert parsed.targets == (("chocolate", "above"),)


class TestRelationPhrases:
    def test_bare_phrase(self):
        assert parse_relation_phrases("left of the red box") == [("red box", "left")]

    def test_multiple_bare_phrases(self):
        got = parse_relation_phrases("left of the red box and close to the tree")
        assert got == [("red box", "left"), ("tree", "close")]

    def test_parse_expression_dispatch(self):
        bare = parse_expression("close to the tree")
        assert bare.source == "self"
        assert bare.targets == (("tree", "close"),)
        full = parse_expression("move the red bowl close to the tree")
        assert full.source == "red bowl"


class TestNormalizeAction:
    def test_exact_match(self):
        assert normalize_action("put", ["move", "put"]) == "put"

    def test_tie_break_by_order(self):
        assert normalize_action("x", ["x", "x"]) == "x"

    def test_similarity_is_deterministic(self):
        first = normalize_action("place", ["move", "put"])
        expected = max(
            ["move", "put"],
            key=lambda s: cosine(embed_text("place"), embed_text(s)),
        )
        assert first == expected
        assert normalize_action("place", ["move", "put"]) == first

    def test_empty_skill_set(self):
        with pytest.raises(ValueError):
            normalize_action("put", [])


class TestRelationTuples:
    def test_single_target(self):
        parsed = ParsedInstruction("put", "cyan bowl", (("chocolate", "above"),))
        tuples = to_relation_tuples(parsed)
        assert len(tuples) == 1
        np.testing.assert_array_equal(tuples[0].f_ref, embed_text("chocolate"))
        np.testing.assert_array_equal(tuples[0].f_pred, embed_text("above"))

    def test_order_and_identity(self):
        parsed = parse_grammar(
            "put the green ring to the left of the gray cube, the above of the "
            "gray cube, and the right of the red bowl"
        )
        tuples = to_relation_tuples(parsed)
        assert [t.ref_text for t in tuples] == ["gray cube", "gray cube", "red bowl"]
        np.testing.assert_array_equal(tuples[0].f_ref, tuples[1].f_ref)

    def test_empty_targets_rejected(self):
        with pytest.raises(ValueError):
            to_relation_tuples(ParsedInstruction("wave", "self", ()))


def reply_for(parsed: ParsedInstruction) -> str:
    payload = {
        "action": parsed.action,
        "source": parsed.source,
        "target": [[r, p] for r, p in parsed.targets],
    }
    return "Here is the structured parse:\n```json\n" + json.dumps(payload) + "\n```"


class TestParseLlm:
    def make_replay(self, tmp_path, instructions):
        config = LlmClientConfig(endpoint="unset", model="test-model")
        path = tmp_path / "replay.jsonl"
        with open(path, "w", encoding="utf-8") as fh:
            for ins in instructions:
                entry = record_replay_entry(ins, reply_for(parse_grammar(ins)), config)
                fh.write(json.dumps(entry) + "\n")
        return LlmClientConfig(endpoint=f"replay:{path}", model="test-model")

    def test_replay_agrees_with_grammar(self, tmp_path):
        instruction = "put the cyan bowl above the chocolate and left of the silver spoon"
        config = self.make_replay(tmp_path, [instruction])
        assert parse_llm(instruction, config) == parse_grammar(instruction)

    def test_unknown_request_is_transport_error(self, tmp_path):
        config = self.make_replay(tmp_path, ["put the red bowl above the gray cube"])
        with pytest.raises(LlmTransportError):
            parse_llm("move the tree close to the red bowl", config)

    def test_malformed_reply_is_schema_error(self, tmp_path):
        config_base = LlmClientConfig(endpoint="unset", model="test-model")
        path = tmp_path / "replay.jsonl"
        instruction = "put the red bowl above the gray cube"
        entry = record_replay_entry(instruction, "cannot parse that, sorry", config_base)
        path.write_text(json.dumps(entry) + "\n")
        config = LlmClientConfig(endpoint=f"replay:{path}", model="test-model")
        with pytest.raises(LlmSchemaError):
            parse_llm(instruction, config)

    def test_bad_schema_variants(self, tmp_path):
        config_base = LlmClientConfig(endpoint="unset", model="test-model")
        instruction = "put the red bowl above the gray cube"
        for bad in [
            '{"action": "put", "source": "red bowl"}',
            '{"action": 3, "source": "s", "target": []}',
            '{"action": "put", "source": "s", "target": [["a"]]}',
            '{"action": "put", "source": "s", "target": "left"}',
        ]:
            path = tmp_path / "replay.jsonl"
            entry = record_replay_entry(instruction, bad, config_base)
            path.write_text(json.dumps(entry) + "\n")
            config = LlmClientConfig(endpoint=f"replay:{path}", model="test-model")
            with pytest.raises(LlmSchemaError):
                parse_llm(instruction, config)

    def test_unreachable_endpoint_times_out(self):
        config = LlmClientConfig(
            endpoint="http://127.0.0.1:9/never", model="m", timeout=0.5
        )
        with pytest.raises(LlmTransportError):
            parse_llm("put the red bowl above the gray cube", config)

    def test_live_http_roundtrip(self):
        instruction = "put the cyan bowl above the chocolate"
        expected = parse_grammar(instruction)

        class Handler(BaseHTTPRequestHandler):
            def do_POST(self):
                length = int(self.headers["Content-Length"])
                request = json.loads(self.rfile.read(length))
                assert request["messages"][0]["content"] == DEFAULT_PROMPT
                body = json.dumps(
                    {"choices": [{"message": {"content": reply_for(expected)}}]}
                ).encode()
                self.send_response(200)
                self.send_header("Content-Type", "application/json")
                self.send_header("Content-Length", str(len(body)))
                self.end_headers()
                self.wfile.write(body)

            def log_message(self, *args):
                pass

        server = HTTPServer(("127.0.0.1", 0), Handler)
        thread = threading.Thread(target=server.serve_forever, daemon=True)
        thread.start()
        try:
            config = LlmClientConfig(
                endpoint=f"http://127.0.0.1:{server.server_port}/v1/chat/completions",
                model="m",
                timeout=5.0,
            )
            assert parse_llm(instruction, config) == expected
        finally:
            server.shutdown()
