"""
Chat-model gateway with tool calling.

Two providers share one interface: a live provider speaking the HTTP
chat-completions wire format, and a scripted provider that replays JSON scripts
so every agent can be exercised offline. Sessions are single-threaded; providers
are shared between concurrent sessions.
"""
from __future__ import annotations

import json
import logging
import os
import threading
import time
from dataclasses import dataclass
from pathlib import Path
from typing import Any, Callable, Dict, List, Literal, Optional, Sequence, Union

import requests
from pydantic import BaseModel, Field, field_validator, model_validator

from .errors import ProviderError, ScriptExhaustedError, TransportError

logger = logging.getLogger(__name__)

DEFAULT_API_KEY_ENV = "VULN_LLM_API_KEY"
DEFAULT_ENDPOINT = "https://api.openai.com/v1/chat/completions"
ERROR_MARKER = "ERROR:"
WILDCARD_SCRIPT = "*"


class ToolInvocation(BaseModel):
    id: str
    tool_name: str
    arguments: Dict[str, str] = Field(default_factory=dict)

    @field_validator("arguments", mode="before")
    @classmethod
    def stringify_arguments(cls, v):
        if v is None:
            return {}
        return {str(key): value if isinstance(value, str) else json.dumps(value) for key, value in dict(v).items()}


class ChatMessage(BaseModel):
    role: Literal["system", "user", "assistant", "tool"]
    content: str = ""
    tool_call: Optional[ToolInvocation] = None
    tool_result_for: Optional[str] = None

    @model_validator(mode="after")
    def check_shape(self):
        if not self.content and self.tool_call is None:
            raise ValueError("Message content cannot be empty unless it carries a tool call")
        if self.tool_call is not None and self.role != "assistant":
            raise ValueError("Only assistant messages may carry a tool call")
        if self.role == "tool" and not self.tool_result_for:
            raise ValueError("Tool messages must reference an invocation id")
        return self


class ToolSchema(BaseModel):
    name: str
    description: str
    parameters: Dict[str, str] = Field(default_factory=dict)

    def to_wire(self) -> Dict[str, Any]:
        return {
            "type": "function",
            "function": {
                "name": self.name,
                "description": self.description,
                "parameters": {
                    "type": "object",
                    "properties": {
                        name: {"type": "string", "description": text}
                        for name, text in self.parameters.items()
                    },
                    "required": list(self.parameters),
                },
            },
        }


@dataclass(frozen=True)
class Tool:
    """A tool schema bound to the callable that serves it."""
    schema: ToolSchema
    handler: Callable[[Dict[str, str]], str]


Toolbox = Dict[str, Tool]


class ProviderConfig(BaseModel):
    provider_kind: Literal["live", "scripted"] = "live"
    model_id: str = "gpt-4o"
    temperature: float = 0.0
    max_tool_rounds: int = Field(12, ge=1)
    request_timeout: float = Field(60.0, gt=0)
    retry_attempts: int = Field(3, ge=1)
    retry_backoff: float = Field(2.0, ge=0)
    endpoint_url: str = DEFAULT_ENDPOINT
    api_key_env: str = DEFAULT_API_KEY_ENV
    script_path: Optional[Path] = None

    @field_validator("temperature", mode="before")
    @classmethod
    def force_zero_temperature(cls, v):
        if v not in (None, 0, 0.0, "0", "0.0"):
            logger.warning(f"Ignoring temperature {v}; requests are always sent with temperature 0")
        return 0.0


class Transcript(BaseModel):
    label: str = ""
    messages: List[ChatMessage] = Field(default_factory=list)
    tool_round_count: int = 0
    terminal_text: str = ""
    truncated: bool = False

    @model_validator(mode="after")
    def check_pairing(self):
        for position, message in enumerate(self.messages):
            if message.tool_call is not None:
                following = self.messages[position + 1] if position + 1 < len(self.messages) else None
                if following is None or following.role != "tool" or following.tool_result_for != message.tool_call.id:
                    raise ValueError(f"Invocation {message.tool_call.id} is not followed by its tool result")
            if message.role == "tool":
                previous = self.messages[position - 1] if position else None
                if previous is None or previous.tool_call is None or previous.tool_call.id != message.tool_result_for:
                    raise ValueError(f"Tool result for {message.tool_result_for} has no matching invocation")
        if not self.truncated:
            finals = [m for m in self.messages if m.role == "assistant" and m.tool_call is None]
            if finals and finals[-1].content != self.terminal_text:
                raise ValueError("terminal_text must equal the last tool-free assistant message")
        return self

    def tool_names(self) -> List[str]:
        return [m.tool_call.tool_name for m in self.messages if m.tool_call is not None]


# -- backends -------------------------------------------------------------


class LiveBackend:
    """One chat conversation against a chat-completions endpoint, over a shared or private HTTP session."""

    def __init__(self, config: ProviderConfig, http: Optional[requests.Session] = None):
        self.config = config
        self._owns_http = http is None
        self.http = http if http is not None else requests.Session()

    def close(self) -> None:
        if self._owns_http:
            self.http.close()

    def send(self, messages: Sequence[ChatMessage], tools: Sequence[ToolSchema]) -> ChatMessage:
        api_key = os.getenv(self.config.api_key_env)
        if not api_key:
            raise ProviderError(f"API key not set in environment variable {self.config.api_key_env}")
        body: Dict[str, Any] = {
            "model": self.config.model_id,
            "temperature": 0.0,
            "messages": [_message_to_wire(m) for m in messages],
        }
        if tools:
            body["tools"] = [tool.to_wire() for tool in tools]
            body["tool_choice"] = "auto"
        try:
            response = self.http.post(
                self.config.endpoint_url,
                json=body,
                headers={"Authorization": f"Bearer {api_key}"},
                timeout=self.config.request_timeout,
            )
        except requests.RequestException as e:
            raise TransportError(f"Chat request failed: {str(e)}") from e
        if response.status_code == 429 or response.status_code >= 500:
            raise TransportError(f"Chat endpoint returned HTTP {response.status_code}")
        if response.status_code >= 400:
            raise ProviderError(f"Chat endpoint rejected the request: HTTP {response.status_code} {response.text[:200]}")
        try:
            return _message_from_wire(response.json()["choices"][0]["message"])
        except (KeyError, IndexError, ValueError) as e:
            raise ProviderError(f"Unexpected chat response: {str(e)}") from e


def _message_to_wire(message: ChatMessage) -> Dict[str, Any]:
    if message.role == "tool":
        return {"role": "tool", "tool_call_id": message.tool_result_for, "content": message.content}
    wire: Dict[str, Any] = {"role": message.role, "content": message.content or None}
    if message.tool_call is not None:
        wire["tool_calls"] = [{
            "id": message.tool_call.id,
            "type": "function",
            "function": {"name": message.tool_call.tool_name, "arguments": json.dumps(message.tool_call.arguments)},
        }]
    return wire


def _message_from_wire(payload: Dict[str, Any]) -> ChatMessage:
    calls = payload.get("tool_calls") or []
    if len(calls) > 1:
        logger.warning(f"Model issued {len(calls)} tool calls in one turn; only the first is executed")
    if calls:
        function = calls[0]["function"]
        try:
            arguments = json.loads(function.get("arguments") or "{}")
        except json.JSONDecodeError:
            arguments = {"raw": function.get("arguments", "")}
        return ChatMessage(
            role="assistant",
            content=payload.get("content") or "",
            tool_call=ToolInvocation(id=calls[0]["id"], tool_name=function["name"], arguments=arguments),
        )
    content = payload.get("content") or ""
    if not content:
        raise ValueError("completion carries neither text nor a tool call")
    return ChatMessage(role="assistant", content=content)


class ScriptedBackend:
    """Replays one script; playback is keyed on call order only."""

    def __init__(self, label: str, steps: Sequence[Dict[str, Any]]):
        self.label = label
        self.steps = list(steps)
        self.cursor = 0

    def send(self, messages: Sequence[ChatMessage], tools: Sequence[ToolSchema]) -> ChatMessage:
        if self.cursor >= len(self.steps):
            raise ScriptExhaustedError(f"Script for session '{self.label}' exhausted after {len(self.steps)} steps")
        step = self.steps[self.cursor]
        self.cursor += 1
        if "tool" in step:
            return ChatMessage(
                role="assistant",
                content=step.get("text", ""),
                tool_call=ToolInvocation(id=f"call-{self.cursor}", tool_name=step["tool"], arguments=step.get("args") or {}),
            )
        if "text" in step:
            return ChatMessage(role="assistant", content=step["text"])
        raise ProviderError(f"Invalid script step {self.cursor} in session '{self.label}': {step}")


# -- providers ------------------------------------------------------------


class LiveProvider:
    """Every session reuses one HTTP session; ``close`` releases its connections."""

    def __init__(self, config: ProviderConfig):
        self.config = config
        self.http = requests.Session()

    def open(self, label: str) -> LiveBackend:
        return LiveBackend(self.config, self.http)

    def close(self) -> None:
        self.http.close()


class ScriptedProvider:
    """
    Holds scripts keyed by session label.

    A label such as ``analyze:CVE-2019-19947:kvaser_usb_leaf_send_simple_cmd:5be1c0`` resolves
    to the longest colon-prefix present in the scripts, falling back to ``*``.
    Every opened session gets its own cursor.
    """

    def __init__(self, scripts: Union[Sequence[Dict[str, Any]], Dict[str, Sequence[Dict[str, Any]]]]):
        if isinstance(scripts, dict):
            self.scripts = {key: list(steps) for key, steps in scripts.items()}
        else:
            self.scripts = {WILDCARD_SCRIPT: list(scripts)}
        self._lock = threading.Lock()
        self.opened_labels: List[str] = []

    @classmethod
    def from_file(cls, path: Union[str, Path]) -> "ScriptedProvider":
        try:
            with open(path, "r", encoding="utf-8") as handle:
                return cls(json.load(handle))
        except (OSError, json.JSONDecodeError) as e:
            raise ProviderError(f"Cannot load script file {path}: {str(e)}") from e

    def resolve(self, label: str) -> Optional[str]:
        parts = label.split(":")
        for size in range(len(parts), 0, -1):
            key = ":".join(parts[:size])
            if key in self.scripts:
                return key
        return WILDCARD_SCRIPT if WILDCARD_SCRIPT in self.scripts else None

    def open(self, label: str) -> ScriptedBackend:
        with self._lock:
            self.opened_labels.append(label)
        key = self.resolve(label)
        if key is None:
            raise ScriptExhaustedError(f"No script matches session '{label}'")
        return ScriptedBackend(label, self.scripts[key])

    def count_opened(self, prefix: str) -> int:
        with self._lock:
            return sum(1 for label in self.opened_labels if label == prefix or label.startswith(prefix + ":"))


def build_provider(config: ProviderConfig):
    if config.provider_kind == "scripted":
        if config.script_path is None:
            raise ProviderError("Scripted provider requires script_path")
        return ScriptedProvider.from_file(config.script_path)
    return LiveProvider(config)


# -- gateway and sessions -------------------------------------------------


class LLMGateway:
    """
    Entry point used by the agents; opens one session per agent conversation.

    A provider built from the config belongs to the gateway and is closed with it.
    """

    def __init__(self, config: ProviderConfig, provider=None):
        self.config = config
        self._owns_provider = provider is None
        self.provider = provider if provider is not None else build_provider(config)

    def __enter__(self) -> "LLMGateway":
        return self

    def __exit__(self, *exc) -> None:
        self.close()

    def session(self, label: str) -> "ChatSession":
        return ChatSession(self.config, label, self.provider.open(label))

    def close(self) -> None:
        if self._owns_provider and hasattr(self.provider, "close"):
            self.provider.close()


class ChatSession:
    def __init__(self, config: ProviderConfig, label: str, backend):
        self.config = config
        self.label = label
        self.backend = backend

    def complete(self, messages: Sequence[ChatMessage], tools: Sequence[ToolSchema] = ()) -> ChatMessage:
        if not messages:
            raise ValueError("At least one message is required")
        if messages[0].role != "system":
            raise ValueError("The first message must be the system prompt")
        for attempt in range(1, self.config.retry_attempts + 1):
            try:
                return self.backend.send(messages, tools)
            except TransportError as e:
                if attempt == self.config.retry_attempts:
                    raise TransportError(f"{str(e)} (gave up after {attempt} attempts)") from e
                logger.warning(f"Transport error in session '{self.label}', attempt {attempt}: {str(e)}")
                time.sleep(self.config.retry_backoff)
        raise TransportError("unreachable")

    def run_tool_loop(self, seed_messages: Sequence[ChatMessage], toolbox: Toolbox) -> Transcript:
        messages = list(seed_messages)
        schemas = [tool.schema for tool in toolbox.values()]
        rounds = 0
        while True:
            reply = self.complete(messages, schemas)
            messages.append(reply)
            call = reply.tool_call
            if call is None:
                return Transcript(label=self.label, messages=messages, tool_round_count=rounds,
                                  terminal_text=reply.content)
            if rounds >= self.config.max_tool_rounds:
                logger.warning(f"Session '{self.label}' hit the tool round limit ({self.config.max_tool_rounds})")
                messages.append(ChatMessage(
                    role="tool",
                    content=f"{ERROR_MARKER} tool round limit of {self.config.max_tool_rounds} reached",
                    tool_result_for=call.id,
                ))
                return Transcript(label=self.label, messages=messages, tool_round_count=rounds, truncated=True)
            rounds += 1
            messages.append(ChatMessage(role="tool", content=_execute(call, toolbox), tool_result_for=call.id))


def _execute(call: ToolInvocation, toolbox: Toolbox) -> str:
    tool = toolbox.get(call.tool_name)
    if tool is None:
        return f"{ERROR_MARKER} unknown tool '{call.tool_name}'"
    try:
        result = tool.handler(call.arguments)
    except Exception as e:
        logger.info(f"Tool {call.tool_name} failed: {str(e)}")
        return f"{ERROR_MARKER} {type(e).__name__}: {str(e)}"
    return result or "(no output)"


def complete(config: ProviderConfig, messages: Sequence[ChatMessage], tools: Sequence[ToolSchema] = (),
             provider=None) -> ChatMessage:
    """One completion in a throwaway session."""
    with LLMGateway(config, provider) as gateway:
        return gateway.session(WILDCARD_SCRIPT).complete(messages, tools)


def run_tool_loop(config: ProviderConfig, seed_messages: Sequence[ChatMessage], toolbox: Toolbox,
                  provider=None) -> Transcript:
    with LLMGateway(config, provider) as gateway:
        return gateway.session(WILDCARD_SCRIPT).run_tool_loop(seed_messages, toolbox)


def system(text: str) -> ChatMessage:
    return ChatMessage(role="system", content=text)


def user(text: str) -> ChatMessage:
    return ChatMessage(role="user", content=text)
