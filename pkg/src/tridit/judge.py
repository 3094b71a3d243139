"""Vision-judge protocol: prompt construction, strict response parsing, transports.

The judge receives one task prompt plus image attachments ordered (original,
style references..., generated) and must answer with a JSON document scoring
style and content consistency on a 1-5 integer scale. No live API is
required: transports are pluggable and a mock HTTP endpoint ships for tests.
"""
from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path
from typing import Callable, Optional, Protocol, Sequence

import httpx

from .errors import JudgeProtocolError

JUDGE_PROMPT_TEMPLATE = """\
Evaluate the style transfer of an image based on the provided reference style images and the original content image.

Style Consistency: How well does the generated image reflect the artistic style and overall atmosphere of the reference style images? The rating is given on a scale from 1 (highly inconsistent) to 5 (extremely consistent).

Content Consistency: How closely does the generated image resemble the content of the original image, including key elements like facial features and the overall layout? The rating is given on a scale from 1 (highly inconsistent) to 5 (extremely consistent).

The scores are then outputted in JSON format as follows:

{
"style_consistency": {
"score": 5,
"reason": "xxx"
},
"content_consistency": {
"score": 4,
"reason": "xxx"
}
}
"""

JUDGE_RESPONSE_EXAMPLE = """\
{
"style_consistency": {
"score": 5,
"reason": "xxx"
},
"content_consistency": {
"score": 4,
"reason": "xxx"
}
}
"""


@dataclass(frozen=True)
class ScoreBlock:
    score: int
    reason: str


@dataclass(frozen=True)
class JudgeVerdict:
    style_consistency: ScoreBlock
    content_consistency: ScoreBlock


@dataclass(frozen=True)
class JudgeRequest:
    prompt: str
    attachments: tuple[tuple[str, str], ...]  # (role, image ref), in protocol order

    def to_document(self) -> dict:
        return {
            "prompt": self.prompt,
            "attachments": [{"role": role, "ref": ref} for role, ref in self.attachments],
        }


def build_judge_prompt(
    original: str | Path,
    style_refs: Sequence[str | Path],
    generated: str | Path,
) -> JudgeRequest:
    """Assemble the scoring request; attachments ordered original, refs, generated."""
    if not style_refs:
        raise JudgeProtocolError("at least one style reference image is required")
    paths = [("original", Path(original))]
    paths += [("style_reference", Path(p)) for p in style_refs]
    paths.append(("generated", Path(generated)))
    missing = [str(p) for _, p in paths if not p.exists()]
    if missing:
        raise JudgeProtocolError(f"missing image file(s): {missing}")
    return JudgeRequest(
        prompt=JUDGE_PROMPT_TEMPLATE,
        attachments=tuple((role, str(p)) for role, p in paths),
    )


def _parse_block(payload: dict, key: str) -> ScoreBlock:
    if key not in payload:
        raise JudgeProtocolError(f"missing key at {key}")
    block = payload[key]
    if not isinstance(block, dict):
        raise JudgeProtocolError(f"expected object at {key}")
    if "score" not in block:
        raise JudgeProtocolError(f"missing key at {key}.score")
    score = block["score"]
    if isinstance(score, bool) or not isinstance(score, int):
        raise JudgeProtocolError(f"non-integer score at {key}.score: {score!r}")
    if not 1 <= score <= 5:
        raise JudgeProtocolError(f"score out of range [1, 5] at {key}.score: {score}")
    if "reason" not in block:
        raise JudgeProtocolError(f"missing key at {key}.reason")
    reason = block["reason"]
    if not isinstance(reason, str):
        raise JudgeProtocolError(f"expected string at {key}.reason")
    return ScoreBlock(score=score, reason=reason)


def parse_judge_response(text: str) -> JudgeVerdict:
    """Strictly parse a judge reply; unknown extra keys are ignored."""
    try:
        payload = json.loads(text)
    except json.JSONDecodeError as exc:
        raise JudgeProtocolError(f"response is not valid JSON: {exc}") from exc
    if not isinstance(payload, dict):
        raise JudgeProtocolError("response must be a JSON object")
    return JudgeVerdict(
        style_consistency=_parse_block(payload, "style_consistency"),
        content_consistency=_parse_block(payload, "content_consistency"),
    )


class JudgeTransport(Protocol):
    def send(self, request: JudgeRequest) -> str: ...


class CannedJudgeTransport:
    """Offline transport returning a fixed (or computed) response text."""

    def __init__(self, response: str | Callable[[JudgeRequest], str] = JUDGE_RESPONSE_EXAMPLE):
        self._response = response

    def send(self, request: JudgeRequest) -> str:
        if callable(self._response):
            return self._response(request)
        return self._response


class HttpJudgeTransport:
    """POSTs the request document to a judge endpoint returning {"response": text}."""

    def __init__(self, url: str, client: Optional[httpx.Client] = None):
        self.url = url
        self._client = client

    def send(self, request: JudgeRequest) -> str:
        client = self._client or httpx
        reply = client.post(self.url, json=request.to_document())
        if reply.status_code != 200:
            raise JudgeProtocolError(f"judge endpoint returned {reply.status_code}")
        payload = reply.json()
        if "response" not in payload:
            raise JudgeProtocolError("judge endpoint payload missing 'response'")
        return payload["response"]


def create_judge_app(responder: Optional[Callable[[dict], str]] = None):
    """FastAPI app exposing POST /judge with canned verdicts, for tests."""
    from fastapi import FastAPI
    from pydantic import BaseModel

    class Attachment(BaseModel):
        role: str
        ref: str

    class JudgeCall(BaseModel):
        prompt: str
        attachments: list[Attachment]

    class JudgeReply(BaseModel):
        response: str

    app = FastAPI(title="mock judge")

    @app.post("/judge", response_model=JudgeReply)
    def judge(call: JudgeCall) -> JudgeReply:
        if responder is not None:
            return JudgeReply(response=responder(call.model_dump()))
        return JudgeReply(response=JUDGE_RESPONSE_EXAMPLE)

    return app


def judge_sample(
    transport: JudgeTransport,
    original: str | Path,
    style_refs: Sequence[str | Path],
    generated: str | Path,
) -> JudgeVerdict:
    request = build_judge_prompt(original, style_refs, generated)
    return parse_judge_response(transport.send(request))
