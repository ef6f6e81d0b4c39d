"""Transport and retry behaviour of the chat-model client layer."""

import base64
import json

import pytest

from bodyforge.clients import (
    ModelClient,
    ScriptedTransport,
    TransportError,
    image_part_from_file,
    text_part,
)


def make_image(tmp_path, name, payload: bytes):
    path = tmp_path / name
    path.write_bytes(payload)
    return path


class RecordingTransport:
    def __init__(self, responses):
        self.responses = list(responses)
        self.payloads = []

    def __call__(self, payload):
        self.payloads.append(json.loads(json.dumps(payload)))
        item = self.responses.pop(0)
        if isinstance(item, Exception):
            raise item
        return item


def test_text_part_shape():
    assert text_part("hello") == {"type": "text", "text": "hello"}


def test_image_part_roundtrips_bytes(tmp_path):
    raw = b"\x89PNG fake bytes \x00\x01"
    path = make_image(tmp_path, "a.png", raw)
    part = image_part_from_file(path)
    assert part["type"] == "image_base64"
    assert base64.b64decode(part["data"]) == raw


def test_scripted_default_when_no_rule_matches():
    transport = ScriptedTransport({"default": "fallback"})
    out = transport({"model": "m", "messages": [{"role": "user", "content": [text_part("anything")]}]})
    assert out == {"content": "fallback"}


def test_scripted_requires_default():
    with pytest.raises(ValueError):
        ScriptedTransport({"rules": []})


def test_scripted_first_matching_rule_wins():
    transport = ScriptedTransport(
        {
            "rules": [
                {"prompt_contains": "clothes", "response": "first"},
                {"prompt_contains": "clothes", "response": "second"},
            ],
            "default": "none",
        }
    )
    payload = {"model": "m", "messages": [{"role": "user", "content": [text_part("same clothes?")]}]}
    assert transport(payload)["content"] == "first"
    assert transport.calls == 1


def test_scripted_min_images_condition(tmp_path):
    img = make_image(tmp_path, "x.bin", b"pixels")
    transport = ScriptedTransport(
        {"rules": [{"min_images": 2, "response": "pair"}], "default": "solo"}
    )
    one = [text_part("q"), image_part_from_file(img)]
    two = one + [image_part_from_file(img)]
    assert transport({"messages": [{"role": "user", "content": one}]})["content"] == "solo"
    assert transport({"messages": [{"role": "user", "content": two}]})["content"] == "pair"


def test_scripted_image_contains_matches_decoded_bytes(tmp_path):
    marked = make_image(tmp_path, "marked.bin", b"prefix MARKER-7 suffix")
    plain = make_image(tmp_path, "plain.bin", b"nothing here")
    transport = ScriptedTransport(
        {"rules": [{"image_contains": "MARKER-7", "response": "hit"}], "default": "miss"}
    )

    def payload(path):
        return {"messages": [{"role": "user", "content": [text_part("q"), image_part_from_file(path)]}]}

    assert transport(payload(marked))["content"] == "hit"
    assert transport(payload(plain))["content"] == "miss"


def test_scripted_fail_rule_raises():
    transport = ScriptedTransport(
        {"rules": [{"prompt_contains": "boom", "fail": True}], "default": "ok"}
    )
    payload = {"messages": [{"role": "user", "content": [text_part("boom now")]}]}
    with pytest.raises(TransportError):
        transport(payload)


def test_scripted_from_json(tmp_path):
    script = {"rules": [{"prompt_contains": "hi", "response": "yo"}], "default": "d"}
    path = tmp_path / "script.json"
    path.write_text(json.dumps(script))
    transport = ScriptedTransport.from_json(path)
    payload = {"messages": [{"role": "user", "content": [text_part("hi there")]}]}
    assert transport(payload)["content"] == "yo"


def test_scripted_identical_payload_identical_response(tmp_path):
    img = make_image(tmp_path, "i.bin", b"stuff")
    transport = ScriptedTransport({"default": "same"})
    payload = {"messages": [{"role": "user", "content": [text_part("q"), image_part_from_file(img)]}]}
    assert transport(payload) == transport(payload)


def test_client_builds_wire_payload(tmp_path):
    img = make_image(tmp_path, "photo.bin", b"imagebytes")
    transport = RecordingTransport([{"content": "answer"}])
    client = ModelClient(transport, model="vlm-1", temperature=0.0)
    out = client.ask("describe this", [img])
    assert out == "answer"
    sent = transport.payloads[0]
    assert sent["model"] == "vlm-1"
    assert sent["temperature"] == 0.0
    assert len(sent["messages"]) == 1
    message = sent["messages"][0]
    assert message["role"] == "user"
    assert message["content"][0] == {"type": "text", "text": "describe this"}
    assert message["content"][1]["type"] == "image_base64"
    assert base64.b64decode(message["content"][1]["data"]) == b"imagebytes"


def test_client_omits_temperature_by_default():
    transport = RecordingTransport([{"content": "x"}])
    ModelClient(transport).ask("q")
    assert "temperature" not in transport.payloads[0]


def test_client_retries_then_succeeds():
    transport = RecordingTransport(
        [TransportError("down"), TransportError("down"), {"content": "up"}]
    )
    client = ModelClient(transport, max_attempts=3, retry_delay=0.0)
    assert client.ask("q") == "up"
    assert len(transport.payloads) == 3


def test_client_gives_up_after_max_attempts():
    transport = RecordingTransport([TransportError("down")] * 3)
    client = ModelClient(transport, max_attempts=3, retry_delay=0.0)
    with pytest.raises(TransportError, match="after 3 attempts"):
        client.ask("q")
    assert len(transport.payloads) == 3


def test_client_rejects_malformed_response():
    client = ModelClient(RecordingTransport([{"content": 42}]), retry_delay=0.0)
    with pytest.raises(TransportError, match="malformed"):
        client.ask("q")


def test_client_rejects_non_list_message_content():
    client = ModelClient(RecordingTransport([{"content": "never"}]), retry_delay=0.0)
    with pytest.raises(ValueError):
        client.ask_messages([{"role": "user", "content": "bare string"}])
