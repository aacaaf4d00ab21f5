"""
Scenario model: node identities, link models, load classes, timing
parameters and the line-oriented scenario file format.
"""

import hashlib
import re
from enum import Enum
from typing import Dict, Iterable, List, NamedTuple, Optional, Tuple

from pydantic import BaseModel, ConfigDict, Field, PrivateAttr, ValidationError, model_validator

from ..errors import ScenarioError, UnknownNodeError
from . import presets
from .strategy import StrategyConfig, format_strategy, parse_strategy

DurationMs = float


class Role(str, Enum):
    """Host types of the overlay."""
    OH = "OH"
    EH = "EH"
    MH = "MH"


class NodeId(NamedTuple):
    """Node identity; tuple order (role, id) is the global tie-break order."""

    role: Role
    id: int

    def __str__(self) -> str:
        return f"{self.role.value.lower()}{self.id}"

    @classmethod
    def parse(cls, text: str) -> "NodeId":
        """Parse ``oh3`` / ``eh12`` / ``mh0``."""
        match = re.fullmatch(r"(oh|eh|mh)(\d+)", text.strip().lower())
        if not match:
            raise ValueError(f"invalid node id '{text}'")
        return cls(Role(match.group(1).upper()), int(match.group(2)))

    @classmethod
    def oh(cls, i: int) -> "NodeId":
        return cls(Role.OH, i)

    @classmethod
    def eh(cls, i: int) -> "NodeId":
        return cls(Role.EH, i)

    @classmethod
    def mh(cls, i: int = 0) -> "NodeId":
        return cls(Role.MH, i)


class LinkModel(BaseModel):
    """Per region-pair network behaviour."""

    model_config = ConfigDict(frozen=True)

    base_latency_ms: float = Field(..., gt=0, description="One-way latency")
    jitter_ms: float = Field(0.0, ge=0, description="Uniform +/- jitter on one-way latency")
    connect_fast_ms: float = Field(..., ge=0, description="Handshake time on the fast path")
    slow_connect_probability: float = Field(0.0, ge=0, le=1, description="Chance a link sits on the slow tail")
    slow_connect_ms: float = Field(0.0, ge=0, description="Slow-tail scale")
    syn_loss_probability: float = Field(0.0, ge=0, le=1, description="Per-SYN loss chance")
    drop_probability: float = Field(0.0, ge=0, le=1, description="Per-packet loss chance")


class LoadClass(BaseModel):
    """Node load: ``load_factor`` scales service delays, ``reported_load`` goes to the MH."""

    model_config = ConfigDict(frozen=True)

    load_factor: float = Field(0.0, ge=0)
    reported_load: float = Field(0.0, ge=0, le=1)

    @classmethod
    def from_factor(cls, load_factor: float, reported: Optional[float] = None) -> "LoadClass":
        return cls(
            load_factor=load_factor,
            reported_load=min(1.0, load_factor) if reported is None else reported,
        )


class NodeSpec(BaseModel):
    model_config = ConfigDict(frozen=True)

    node: NodeId
    region: str
    load: LoadClass = LoadClass()


class FailureKind(str, Enum):
    NODE_DOWN = "node_down"
    NODE_UP = "node_up"
    LINK_DOWN = "link_down"
    LINK_UP = "link_up"


class FailureEvent(BaseModel):
    """Scheduled fault. Link events name a directed pair ``target>peer``."""

    model_config = ConfigDict(frozen=True)

    at_ms: float = Field(0.0, ge=0)
    kind: FailureKind
    target: NodeId
    peer: Optional[NodeId] = None

    @model_validator(mode="after")
    def check_peer(self) -> "FailureEvent":
        is_link = self.kind in (FailureKind.LINK_DOWN, FailureKind.LINK_UP)
        if is_link and self.peer is None:
            raise ValueError(f"{self.kind.value} needs a 'src>dst' target")
        if not is_link and self.peer is not None:
            raise ValueError(f"{self.kind.value} takes a single node target")
        return self

    @property
    def target_text(self) -> str:
        return f"{self.target}>{self.peer}" if self.peer is not None else str(self.target)


class TimingParams(BaseModel):
    """Protocol timers and service-time model; every value overridable per scenario."""

    model_config = ConfigDict(frozen=True)

    syn_schedule_ms: Tuple[float, ...] = Field((3000.0, 6000.0, 12000.0, 24000.0, 48000.0))
    os_cap_ms: float = Field(75000.0, gt=0)
    probe_timeout_ms: float = Field(5000.0, gt=0)
    load_interval_ms: float = Field(5000.0, gt=0)
    missed_reports: int = Field(3, ge=1)
    reconnect_base_ms: float = Field(1000.0, gt=0)
    reconnect_cap_ms: float = Field(30000.0, gt=0)
    reconnect_max_retries: int = Field(6, ge=1)
    stream_reconnect_attempts: int = Field(1, ge=0)
    mh_retry_attempts: int = Field(5, ge=1)
    mh_service_ms: float = Field(1.0, ge=0)
    decision_op_us: float = Field(0.2, ge=0)

    @model_validator(mode="after")
    def check_schedule(self) -> "TimingParams":
        offsets = list(self.syn_schedule_ms)
        if offsets != sorted(offsets) or any(o <= 0 for o in offsets):
            raise ValueError("syn_schedule_ms must be positive and increasing")
        return self

    def backoff_ms(self, retry: int) -> float:
        """Delay before reconnect ``retry`` (0-based): base * 2^retry, capped."""
        return min(self.reconnect_cap_ms, self.reconnect_base_ms * (2 ** retry))


class ScenarioSpec(BaseModel):
    """Fully resolved scenario."""

    model_config = ConfigDict(frozen=True)

    oh_nodes: Tuple[NodeSpec, ...] = ()
    eh_nodes: Tuple[NodeSpec, ...] = ()
    mh: NodeSpec
    region_links: Dict[Tuple[str, str], LinkModel]
    strategy: StrategyConfig = StrategyConfig()
    failure_schedule: Tuple[FailureEvent, ...] = ()
    seed: int = Field(0, ge=0, lt=2 ** 64)
    w_load: float = Field(0.0, ge=0)
    timing: TimingParams = TimingParams()

    _index: Dict[NodeId, NodeSpec] = PrivateAttr(default_factory=dict)

    @model_validator(mode="after")
    def check_topology(self) -> "ScenarioSpec":
        if self.mh.node.role is not Role.MH:
            raise ValueError("mh node must have role MH")
        for spec in self.oh_nodes:
            if spec.node.role is not Role.OH:
                raise ValueError(f"{spec.node} listed as OH")
        for spec in self.eh_nodes:
            if spec.node.role is not Role.EH:
                raise ValueError(f"{spec.node} listed as EH")
        ids = [s.node for s in self.all_nodes()]
        if len(set(ids)) != len(ids):
            raise ValueError("duplicate node ids")
        regions = self.regions()
        for a in regions:
            for b in regions:
                if (a, b) not in self.region_links:
                    raise ValueError(f"no link model for region pair ({a}, {b})")
        known = set(ids)
        for event in self.failure_schedule:
            for n in (event.target, event.peer):
                if n is not None and n not in known:
                    raise ValueError(f"failure references unknown node {n}")
        return self

    def model_post_init(self, __context) -> None:
        self._index = {s.node: s for s in self.all_nodes()}

    def all_nodes(self) -> List[NodeSpec]:
        return [*self.oh_nodes, *self.eh_nodes, self.mh]

    def regions(self) -> List[str]:
        return sorted({s.region for s in self.all_nodes()})

    def node(self, node: NodeId) -> NodeSpec:
        try:
            return self._index[node]
        except KeyError:
            raise UnknownNodeError(f"unknown node {node}") from None

    def link(self, src: NodeId, dst: NodeId) -> LinkModel:
        return self.region_links[(self.node(src).region, self.node(dst).region)]

    @property
    def oh_ids(self) -> List[NodeId]:
        return [s.node for s in self.oh_nodes]

    @property
    def eh_ids(self) -> List[NodeId]:
        return [s.node for s in self.eh_nodes]

    def restrict(self, n_oh: Optional[int] = None, n_eh: Optional[int] = None) -> "ScenarioSpec":
        """
        Sub-scenario with the first ``n_oh`` OHs and ``n_eh`` EHs picked evenly
        across the EH list. Node ids are kept; failures on dropped nodes vanish.
        """
        ohs = self.oh_nodes if n_oh is None else self.oh_nodes[:n_oh]
        ehs = self.eh_nodes if n_eh is None else _spread(self.eh_nodes, n_eh)
        if n_oh is not None and len(ohs) < n_oh:
            raise ScenarioError(f"scenario has {len(self.oh_nodes)} OHs, {n_oh} requested")
        if n_eh is not None and len(ehs) < n_eh:
            raise ScenarioError(f"scenario has {len(self.eh_nodes)} EHs, {n_eh} requested")
        kept = {s.node for s in (*ohs, *ehs, self.mh)}
        failures = tuple(
            f for f in self.failure_schedule
            if f.target in kept and (f.peer is None or f.peer in kept)
        )
        return self.model_copy(update={
            "oh_nodes": tuple(ohs), "eh_nodes": tuple(ehs), "failure_schedule": failures,
        })

    def with_overrides(self, **update) -> "ScenarioSpec":
        """Validated copy with fields replaced (``seed``, ``strategy``, ...)."""
        data = {name: getattr(self, name) for name in type(self).model_fields}
        data.update(update)
        return type(self)(**data)


def _spread(nodes: Tuple[NodeSpec, ...], count: int) -> Tuple[NodeSpec, ...]:
    if count >= len(nodes):
        return nodes
    total = len(nodes)
    return tuple(nodes[(i * total) // count] for i in range(count))


# --- scenario file ------------------------------------------------------------

_LINE_RE = re.compile(r"^\[(\w+)\]\s*(.*)$")

_LINK_KEYS = {
    "base_ms": "base_latency_ms",
    "jitter_ms": "jitter_ms",
    "fast_ms": "connect_fast_ms",
    "slow_p": "slow_connect_probability",
    "slow_ms": "slow_connect_ms",
    "syn_loss_p": "syn_loss_probability",
    "drop_p": "drop_probability",
}
_LINK_KEYS_REVERSE = {v: k for k, v in _LINK_KEYS.items()}

DEFAULT_LINK_PRESET = "zones-tail"


class _Builder:
    """Accumulates parsed lines before node ids are assigned."""

    def __init__(self):
        self.oh: List[Tuple[str, LoadClass, int]] = []
        self.eh: List[Tuple[str, LoadClass, int]] = []
        self.mh: Optional[Tuple[str, LoadClass, int]] = None
        self.links: Dict[Tuple[str, str], Tuple[LinkModel, int]] = {}
        self.wildcard: Optional[Tuple[LinkModel, int]] = None
        self.link_presets: List[str] = []
        self.saw_link = False
        self.timing: Dict[str, object] = {}
        self.timing_line = 0
        self.run: Dict[str, object] = {}
        self.failures: List[Tuple[Dict[str, str], int]] = []


def _fields(rest: str, lineno: int) -> Dict[str, str]:
    fields: Dict[str, str] = {}
    for token in rest.split():
        key, eq, value = token.partition("=")
        if not eq or not key or not value:
            raise ScenarioError(f"expected key=value, got '{token}'", lineno)
        if key in fields:
            raise ScenarioError(f"duplicate key '{key}'", lineno)
        fields[key] = value
    return fields


def _number(fields: Dict[str, str], key: str, lineno: int, default=None, kind=float):
    if key not in fields:
        if default is None:
            raise ScenarioError(f"missing '{key}'", lineno)
        return default
    try:
        return kind(fields[key])
    except ValueError:
        raise ScenarioError(f"'{key}' is not a valid {kind.__name__}: {fields[key]}", lineno) from None


def _check_keys(fields: Dict[str, str], allowed: Iterable[str], lineno: int) -> None:
    unknown = sorted(set(fields) - set(allowed))
    if unknown:
        raise ScenarioError(f"unknown key(s) {', '.join(unknown)}", lineno)


def _load_class(fields: Dict[str, str], lineno: int) -> LoadClass:
    factor = _number(fields, "load", lineno, 0.0)
    reported = _number(fields, "reported", lineno, min(1.0, factor)) if "reported" in fields else None
    try:
        return LoadClass.from_factor(factor, reported)
    except ValidationError as e:
        raise ScenarioError(f"invalid load: {_first_error(e)}", lineno) from None


def _first_error(e: ValidationError) -> str:
    err = e.errors()[0]
    loc = ".".join(str(p) for p in err.get("loc", ()))
    return f"{loc}: {err['msg']}" if loc else err["msg"]


def _parse_hosts(b: _Builder, section: str, fields: Dict[str, str], lineno: int) -> None:
    target = b.oh if section == "oh" else b.eh
    if "preset" in fields:
        _check_keys(fields, {"preset"}, lineno)
        try:
            table, size = presets.parse_node_preset(fields["preset"])
            expected = "table1" if section == "oh" else "table2"
            if table != expected:
                raise ValueError(f"preset '{fields['preset']}' is not an {section} preset")
            if table == "table1":
                for region, load in presets.table1_nodes(size):
                    target.append((region, LoadClass.from_factor(load), lineno))
            else:
                for region, count in presets.table2_counts(size):
                    target.extend((region, LoadClass(), lineno) for _ in range(count))
        except ValueError as e:
            raise ScenarioError(str(e), lineno) from None
        return
    _check_keys(fields, {"region", "count", "load", "reported"}, lineno)
    if "region" not in fields:
        raise ScenarioError("missing 'region'", lineno)
    count = _number(fields, "count", lineno, 1, int)
    if count < 0:
        raise ScenarioError("count must be >= 0", lineno)
    load = _load_class(fields, lineno)
    target.extend((fields["region"].lower(), load, lineno) for _ in range(count))


def _parse_mh(b: _Builder, fields: Dict[str, str], lineno: int) -> None:
    _check_keys(fields, {"region", "load", "reported"}, lineno)
    if b.mh is not None:
        raise ScenarioError("exactly one [mh] line is allowed", lineno)
    if "region" not in fields:
        raise ScenarioError("missing 'region'", lineno)
    b.mh = (fields["region"].lower(), _load_class(fields, lineno), lineno)


def _parse_link(b: _Builder, fields: Dict[str, str], lineno: int) -> None:
    b.saw_link = True
    if "preset" in fields:
        _check_keys(fields, {"preset"}, lineno)
        if fields["preset"] not in presets.LINK_PRESETS:
            raise ScenarioError(f"unknown link preset '{fields['preset']}'", lineno)
        b.link_presets.append(fields["preset"])
        return
    _check_keys(fields, {"from", "to", *_LINK_KEYS}, lineno)
    src, dst = fields.get("from", "").lower(), fields.get("to", "").lower()
    if not src or not dst:
        raise ScenarioError("link needs 'from' and 'to'", lineno)
    values = {model_key: _number(fields, key, lineno, 0.0)
              for key, model_key in _LINK_KEYS.items() if key in fields}
    try:
        link = LinkModel(**values)
    except ValidationError as e:
        raise ScenarioError(f"invalid link: {_first_error(e)}", lineno) from None
    if (src == "*") != (dst == "*"):
        raise ScenarioError("wildcard links need from=* and to=*", lineno)
    if src == "*":
        b.wildcard = (link, lineno)
    else:
        b.links[(src, dst)] = (link, lineno)


def _parse_net(b: _Builder, fields: Dict[str, str], lineno: int) -> None:
    allowed = set(TimingParams.model_fields)
    _check_keys(fields, allowed, lineno)
    for key, raw in fields.items():
        if key == "syn_schedule_ms":
            try:
                b.timing[key] = tuple(float(v) for v in raw.split(",") if v)
            except ValueError:
                raise ScenarioError(f"invalid syn_schedule_ms '{raw}'", lineno) from None
        else:
            kind = int if TimingParams.model_fields[key].annotation is int else float
            b.timing[key] = _number(fields, key, lineno, kind=kind)
    b.timing_line = lineno


def _parse_run(b: _Builder, fields: Dict[str, str], lineno: int) -> None:
    _check_keys(fields, {"strategy", "seed", "w_load"}, lineno)
    if "strategy" in fields:
        try:
            b.run["strategy"] = parse_strategy(fields["strategy"])
        except ValueError as e:
            raise ScenarioError(str(e), lineno) from None
    if "seed" in fields:
        b.run["seed"] = _number(fields, "seed", lineno, kind=int)
    if "w_load" in fields:
        b.run["w_load"] = _number(fields, "w_load", lineno)
    b.run["line"] = lineno


def _parse_failure(b: _Builder, fields: Dict[str, str], lineno: int) -> None:
    _check_keys(fields, {"at_ms", "kind", "target"}, lineno)
    b.failures.append((fields, lineno))


_SECTIONS = {
    "oh": lambda b, f, n: _parse_hosts(b, "oh", f, n),
    "eh": lambda b, f, n: _parse_hosts(b, "eh", f, n),
    "mh": _parse_mh,
    "link": _parse_link,
    "net": _parse_net,
    "run": _parse_run,
    "failure": _parse_failure,
}


def _resolve_links(b: _Builder, region_lines: Dict[str, int]) -> Dict[Tuple[str, str], LinkModel]:
    regions = sorted(region_lines)
    link_presets = b.link_presets or ([] if b.saw_link else [DEFAULT_LINK_PRESET])
    resolved: Dict[Tuple[str, str], LinkModel] = {}
    for preset in link_presets:
        for src in regions:
            for dst in regions:
                if src in presets.COUNTRY_ZONE and dst in presets.COUNTRY_ZONE:
                    resolved[(src, dst)] = LinkModel(**presets.zone_link_params(src, dst, preset))
    # explicit lines win; a one-sided line also covers the reverse direction
    for (src, dst), (link, _) in b.links.items():
        if (dst, src) not in b.links:
            resolved[(dst, src)] = link
    for (src, dst), (link, _) in b.links.items():
        resolved[(src, dst)] = link
    for src in regions:
        for dst in regions:
            if (src, dst) in resolved:
                continue
            if b.wildcard is not None:
                resolved[(src, dst)] = b.wildcard[0]
                continue
            missing = src if not _covered(src, resolved, regions) else dst
            raise ScenarioError(f"unknown region '{missing}' (no link model reaches it)",
                                region_lines[missing])
    return {k: v for k, v in resolved.items() if k[0] in region_lines and k[1] in region_lines}


def _covered(region: str, links: Dict[Tuple[str, str], LinkModel], regions: List[str]) -> bool:
    return any((region, other) in links for other in regions)


def load_scenario(text: str) -> ScenarioSpec:
    """
    Parse scenario-file text into a resolved ScenarioSpec.

    Raises:
        ScenarioError: Parse or validation failure, with the line number
    """
    b = _Builder()
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        match = _LINE_RE.match(line)
        if not match:
            raise ScenarioError(f"expected '[section] key=value ...', got '{line}'", lineno)
        section, rest = match.group(1).lower(), match.group(2)
        handler = _SECTIONS.get(section)
        if handler is None:
            raise ScenarioError(f"unknown section [{section}]", lineno)
        handler(b, _fields(rest, lineno), lineno)

    oh_nodes = [NodeSpec(node=NodeId.oh(i), region=r, load=l) for i, (r, l, _) in enumerate(b.oh)]
    eh_nodes = [NodeSpec(node=NodeId.eh(i), region=r, load=l) for i, (r, l, _) in enumerate(b.eh)]
    if b.mh is None:
        first = (b.oh or b.eh or [("romania", LoadClass(), 0)])[0]
        b.mh = (first[0], LoadClass(), first[2])
    mh = NodeSpec(node=NodeId.mh(), region=b.mh[0], load=b.mh[1])

    region_lines: Dict[str, int] = {}
    for region, _, lineno in (*b.oh, *b.eh, b.mh):
        region_lines.setdefault(region, lineno)
    links = _resolve_links(b, region_lines)

    failures = []
    for fields, lineno in b.failures:
        try:
            kind = FailureKind(fields.get("kind", ""))
            target, _, peer = fields.get("target", "").partition(">")
            failures.append(FailureEvent(
                at_ms=_number(fields, "at_ms", lineno, 0.0),
                kind=kind,
                target=NodeId.parse(target),
                peer=NodeId.parse(peer) if peer else None,
            ))
        except ValidationError as e:
            raise ScenarioError(f"invalid failure: {_first_error(e)}", lineno) from None
        except ValueError as e:
            raise ScenarioError(f"invalid failure: {e}", lineno) from None

    try:
        timing = TimingParams(**b.timing)
    except ValidationError as e:
        raise ScenarioError(f"invalid [net]: {_first_error(e)}", b.timing_line) from None

    run_line = b.run.pop("line", None)
    try:
        return ScenarioSpec(
            oh_nodes=tuple(oh_nodes),
            eh_nodes=tuple(eh_nodes),
            mh=mh,
            region_links=links,
            failure_schedule=tuple(sorted(failures, key=lambda f: f.at_ms)),
            timing=timing,
            **b.run,
        )
    except ValidationError as e:
        raise ScenarioError(f"invalid scenario: {_first_error(e)}", run_line) from None


def _fmt(value: float) -> str:
    return repr(float(value))


def _load_fields(load: LoadClass) -> str:
    return f"load={_fmt(load.load_factor)} reported={_fmt(load.reported_load)}"


def dump_scenario(spec: ScenarioSpec) -> str:
    """Serialize a spec; ``load_scenario(dump_scenario(s)) == s``."""
    t = spec.timing
    net = " ".join(
        f"{name}={','.join(_fmt(v) for v in value) if name == 'syn_schedule_ms' else (value if isinstance(value, int) else _fmt(value))}"
        for name, value in ((n, getattr(t, n)) for n in TimingParams.model_fields)
    )
    lines = [
        f"[net] {net}",
        f"[run] strategy={format_strategy(spec.strategy)} seed={spec.seed} w_load={_fmt(spec.w_load)}",
        f"[mh] region={spec.mh.region} {_load_fields(spec.mh.load)}",
    ]
    for section, nodes in (("oh", spec.oh_nodes), ("eh", spec.eh_nodes)):
        run: List[NodeSpec] = []
        for node in (*nodes, None):
            if run and (node is None or (node.region, node.load) != (run[0].region, run[0].load)):
                lines.append(f"[{section}] region={run[0].region} count={len(run)} {_load_fields(run[0].load)}")
                run = []
            if node is not None:
                run.append(node)
    for (src, dst), link in sorted(spec.region_links.items()):
        values = " ".join(f"{_LINK_KEYS_REVERSE[k]}={_fmt(v)}" for k, v in link.model_dump().items())
        lines.append(f"[link] from={src} to={dst} {values}")
    for event in spec.failure_schedule:
        lines.append(f"[failure] at_ms={_fmt(event.at_ms)} kind={event.kind.value} target={event.target_text}")
    return "\n".join(lines) + "\n"


def scenario_hash(spec: ScenarioSpec) -> str:
    """Short content hash binding outputs to their inputs."""
    return hashlib.sha256(dump_scenario(spec).encode("utf-8")).hexdigest()[:16]
