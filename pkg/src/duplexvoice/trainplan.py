"""Declarative training plan: per-stage trainable masks over named param groups.

Two three-stage schedules are encoded: one aligning speech input to the
frozen backbone, one building speech output from it.  This module validates
the masks against the repository's real parameter registry; it does not run
gradient descent.  The one rule every stage must satisfy: the backbone
("llm") group stays frozen.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass, field

from .models import ModelBundle

ALL_GROUPS = (
    "encoder",
    "adapter",
    "prompt_embedding",
    "special_tokens",
    "state_head",
    "llm",
    "llm_embedding",
    "nar_prefix",
    "nar_ar_shared",
    "pre_network",
    "ar_head",
    "codec",
)

LOSS_CTC = "ctc"
LOSS_CE_TEXT = "ce-text"
LOSS_CE_MULTITASK = "ce-multitask-text-state"
LOSS_CE_SPEECH_TF = "ce-speech-token-teacher-forced"
LOSS_CODEC = "codec-reconstruction"


@dataclass(frozen=True)
class StageOptions:
    dynamic_chunk: bool = False
    special_tokens: bool = False
    shared_nar_ar: bool = False


@dataclass(frozen=True)
class StageConfig:
    stage_id: str
    title: str
    trainable: frozenset
    frozen: frozenset
    loss: str
    data: str
    options: StageOptions = field(default_factory=StageOptions)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["trainable"] = sorted(self.trainable)
        d["frozen"] = sorted(self.frozen)
        return d


def _stage(stage_id, title, trainable, loss, data, **options) -> StageConfig:
    trainable = frozenset(trainable)
    return StageConfig(
        stage_id=stage_id,
        title=title,
        trainable=trainable,
        frozen=frozenset(ALL_GROUPS) - trainable,
        loss=loss,
        data=data,
        options=StageOptions(**options),
    )


def builtin_stages() -> list[StageConfig]:
    """The six built-in stages, three per modality direction."""
    return [
        _stage(
            "input-1",
            "speech recognition alignment of the encoder",
            {"encoder"},
            LOSS_CTC,
            "speech -> transcript pairs",
        ),
        _stage(
            "input-2",
            "encoder + adapter into the frozen backbone",
            {"encoder", "adapter", "special_tokens"},
            LOSS_CE_TEXT,
            "speech -> transcript pairs through the backbone",
            dynamic_chunk=True,
            special_tokens=True,
        ),
        _stage(
            "input-3",
            "prompt vectors + dialogue-state head on multi-round QA",
            {"prompt_embedding", "state_head"},
            LOSS_CE_MULTITASK,
            "multi-round spoken questions -> text answers",
        ),
        _stage(
            "output-1",
            "single-codebook codec",
            {"codec"},
            LOSS_CODEC,
            "speech only",
        ),
        _stage(
            "output-2",
            "shared NAR/AR speech decoder, teacher forced",
            {"nar_ar_shared", "ar_head", "pre_network"},
            LOSS_CE_SPEECH_TF,
            "text -> speech-token pairs (frozen backbone embedding as input)",
            shared_nar_ar=True,
        ),
        _stage(
            "output-3",
            "prefix decoder coupling onto backbone hidden states",
            {"nar_prefix"},
            LOSS_CE_SPEECH_TF,
            "multi-round QA text + hidden states -> speech tokens",
            shared_nar_ar=True,
        ),
    ]


# ---------------------------------------------------------------------------
# Registry
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class RegistryEntry:
    param_count: int
    fingerprint: str


@dataclass
class ParamRegistry:
    """Group name -> size and content hash, enumerated from a live bundle."""

    entries: dict[str, RegistryEntry]

    @classmethod
    def from_bundle(cls, bundle: ModelBundle) -> "ParamRegistry":
        entries = {}
        for name, group in bundle.param_groups().items():
            count = sum(p.param_count() for p in group)
            fp = "+".join(p.fingerprint() for p in group)
            entries[name] = RegistryEntry(param_count=count, fingerprint=fp)
        return cls(entries=entries)

    @property
    def groups(self) -> frozenset:
        return frozenset(self.entries)


def validate(stage: StageConfig, registry: ParamRegistry) -> list[str]:
    """Return violation strings; an empty list means the stage is valid."""
    violations: list[str] = []
    overlap = stage.trainable & stage.frozen
    for name in sorted(overlap):
        violations.append(f"overlapping-group:{name}")
    declared = stage.trainable | stage.frozen
    for name in sorted(registry.groups - declared):
        violations.append(f"uncovered-group:{name}")
    for name in sorted(declared - registry.groups):
        violations.append(f"unknown-group:{name}")
    if "llm" not in stage.frozen:
        violations.append("llm-must-be-frozen")
    if stage.options.shared_nar_ar and "nar_ar_shared" not in registry.groups:
        violations.append("shared-nar-ar-missing")
    return violations


def validate_all(registry: ParamRegistry) -> dict[str, list[str]]:
    return {stage.stage_id: validate(stage, registry) for stage in builtin_stages()}


def stages_to_json() -> list[dict]:
    return [stage.to_dict() for stage in builtin_stages()]
