"""Prompt templates, class lists, and the closed tokenizer.

Prompts are lists of per-class phrases.  Each phrase is built from a time
token, the class name (optionally enriched with a synonym or a descriptive
clause), and a weather token, joined by ", ".  The driving benchmark uses
seven classes and five domains; its enrichment map adds "bicycle" and
"motorcycle" as synonyms and replaces the weather token for "rider" with a
full descriptive clause.
"""

import json
import re
from dataclasses import dataclass, field
from typing import Iterable

from .errors import ConfigError, InvalidInputError, ParseError

PROMPT_KINDS = ("general", "domain_specific", "source", "unrelated")

UNK_TOKEN = "<unk>"
UNK_ID = 0

_TOKEN_SPLIT = re.compile(r"[\s,]+")


@dataclass(frozen=True)
class ClassList:
    """Ordered, unique, lowercase class names."""

    names: tuple[str, ...]

    def __init__(self, names: Iterable[str]):
        names = tuple(names)
        if not names:
            raise InvalidInputError("class list must not be empty")
        for n in names:
            if not n or n != n.lower() or n.strip() != n:
                raise InvalidInputError(f"bad class name: {n!r}")
        if len(set(names)) != len(names):
            raise InvalidInputError("class names must be unique")
        object.__setattr__(self, "names", names)

    def __len__(self) -> int:
        return len(self.names)

    def __iter__(self):
        return iter(self.names)

    def index(self, name: str) -> int:
        return self.names.index(name)


DRIVING_CLASSES = ClassList(
    ["bus", "bike", "car", "motor", "person", "rider", "truck"]
)

# Synonyms are inserted between the class name and the weather token.  A
# value containing "{weather}" replaces the weather token entirely.
DRIVING_ENRICHMENT = {
    "bike": "bicycle",
    "motor": "motorcycle",
    "rider": "person who rides a bicycle or motorcycle in the {weather} scene",
}

SOURCE_DOMAIN = "daytime_sunny"

# domain tag -> (time token, weather token)
DOMAIN_TIME_WEATHER = {
    "daytime_foggy": ("daytime", "foggy"),
    "dusk_rainy": ("dusk", "rainy"),
    "night_rainy": ("night", "rainy"),
    "night_sunny": ("night", "sunny"),
}

TARGET_DOMAINS = tuple(DOMAIN_TIME_WEATHER)
ALL_DOMAINS = (SOURCE_DOMAIN,) + TARGET_DOMAINS

SOURCE_TIME = "daytime"
SOURCE_WEATHER = "in the clear scene"

GENERAL_TIMES = ("daytime", "dusk", "night")
GENERAL_WEATHERS = ("foggy", "sunny", "rainy")

# Deliberately uninformative prefix/suffix pairs used to probe how much the
# fitted style depends on prompt content.
UNRELATED_VARIANTS = {
    "A": ("dreamlike setting", "in the scene exudes a boring atmosphere"),
    "B": ("ineffective", "crawl slowly through the desert"),
}


@dataclass
class Prompt:
    """An ordered list of phrases plus bookkeeping about how it was built."""

    phrases: list[str]
    kind: str
    domain_tag: str = ""

    def __post_init__(self):
        if self.kind not in PROMPT_KINDS:
            raise InvalidInputError(f"unknown prompt kind: {self.kind!r}")
        if not self.phrases:
            raise InvalidInputError("prompt must contain at least one phrase")
        for p in self.phrases:
            if not p or "\n" in p:
                raise InvalidInputError(f"bad phrase: {p!r}")

    def __len__(self) -> int:
        return len(self.phrases)

    def text(self) -> str:
        """Render the prompt one phrase per line, comma-continued."""
        return ",\n".join(self.phrases)

    def to_json(self) -> dict:
        return {
            "kind": self.kind,
            "domain_tag": self.domain_tag,
            "phrases": list(self.phrases),
        }

    @classmethod
    def from_json(cls, obj: dict) -> "Prompt":
        try:
            return cls(
                phrases=[str(p) for p in obj["phrases"]],
                kind=str(obj["kind"]),
                domain_tag=str(obj.get("domain_tag", "")),
            )
        except (KeyError, TypeError, InvalidInputError) as exc:
            raise ParseError(f"malformed prompt record: {exc}") from exc


def build_domain_prompt(
    classes: ClassList,
    time: str,
    weather: str,
    enrichment: dict[str, str] | None = None,
    kind: str = "domain_specific",
    domain_tag: str = "",
) -> Prompt:
    """One phrase per class: "<time>, <class>[, <synonym>], <weather>"."""
    if not time or not weather:
        raise InvalidInputError("time and weather tokens must be non-empty")
    enrichment = enrichment or {}
    unknown = set(enrichment) - set(classes.names)
    if unknown:
        raise ConfigError(f"enrichment for unknown classes: {sorted(unknown)}")
    phrases = []
    for cls in classes:
        parts = [time, cls]
        extra = enrichment.get(cls)
        if extra is None:
            parts.append(weather)
        elif "{weather}" in extra:
            parts.append(extra.format(weather=weather))
        else:
            parts.extend([extra, weather])
        phrases.append(", ".join(parts))
    return Prompt(phrases=phrases, kind=kind, domain_tag=domain_tag)


def build_general_prompt(
    classes: ClassList,
    times: Iterable[str] = GENERAL_TIMES,
    weathers: Iterable[str] = GENERAL_WEATHERS,
) -> Prompt:
    """One phrase per class listing every time and weather condition."""
    times = list(times)
    weathers = list(weathers)
    if not times or not weathers:
        raise InvalidInputError("times and weathers must be non-empty")
    phrases = [", ".join([*times, cls, *weathers]) for cls in classes]
    return Prompt(phrases=phrases, kind="general", domain_tag="")


def build_unrelated_prompt(classes: ClassList, variant: str) -> Prompt:
    """Per-class phrases wrapped in semantically unrelated prefix/suffix."""
    if variant not in UNRELATED_VARIANTS:
        raise ConfigError(
            f"unknown unrelated variant {variant!r}; choose from "
            f"{sorted(UNRELATED_VARIANTS)}"
        )
    prefix, suffix = UNRELATED_VARIANTS[variant]
    phrases = [f"{prefix}, {cls}, {suffix}" for cls in classes]
    return Prompt(phrases=phrases, kind="unrelated", domain_tag="")


def source_prompt(classes: ClassList = DRIVING_CLASSES) -> Prompt:
    """The source-domain prompt: no enrichment, clear-scene weather clause."""
    return build_domain_prompt(
        classes,
        SOURCE_TIME,
        SOURCE_WEATHER,
        enrichment=None,
        kind="source",
        domain_tag=SOURCE_DOMAIN,
    )


def domain_prompt(domain_tag: str, classes: ClassList = DRIVING_CLASSES) -> Prompt:
    """The standard prompt for one of the five benchmark domains."""
    if domain_tag == SOURCE_DOMAIN:
        return source_prompt(classes)
    if domain_tag not in DOMAIN_TIME_WEATHER:
        raise ConfigError(f"unknown domain tag: {domain_tag!r}")
    time, weather = DOMAIN_TIME_WEATHER[domain_tag]
    return build_domain_prompt(
        classes,
        time,
        weather,
        enrichment=DRIVING_ENRICHMENT,
        kind="domain_specific",
        domain_tag=domain_tag,
    )


def phrase_tokens(phrase: str) -> list[str]:
    """Lowercase word tokens of one phrase (split on whitespace and commas)."""
    return [t for t in _TOKEN_SPLIT.split(phrase.lower()) if t]


@dataclass
class Vocabulary:
    """Closed token vocabulary; id 0 is reserved for unknown tokens."""

    tokens: list[str]
    _index: dict[str, int] = field(init=False, repr=False)

    def __post_init__(self):
        if not self.tokens or self.tokens[0] != UNK_TOKEN:
            raise InvalidInputError(f"tokens[0] must be {UNK_TOKEN!r}")
        if len(set(self.tokens)) != len(self.tokens):
            raise InvalidInputError("vocabulary tokens must be unique")
        self._index = {t: i for i, t in enumerate(self.tokens)}

    def __len__(self) -> int:
        return len(self.tokens)

    @classmethod
    def build(cls, phrases: Iterable[str]) -> "Vocabulary":
        seen = set()
        for phrase in phrases:
            seen.update(phrase_tokens(phrase))
        return cls([UNK_TOKEN] + sorted(seen))

    def token_id(self, token: str) -> int:
        return self._index.get(token, UNK_ID)

    def to_json(self) -> dict:
        return {"tokens": list(self.tokens)}

    @classmethod
    def from_json(cls, obj: dict) -> "Vocabulary":
        try:
            return cls([str(t) for t in obj["tokens"]])
        except (KeyError, TypeError, InvalidInputError) as exc:
            raise ParseError(f"malformed vocabulary record: {exc}") from exc


def tokenize(prompt: Prompt, vocab: Vocabulary) -> list[list[int]]:
    """Token id lists, one per phrase, unknown tokens mapped to id 0."""
    return [[vocab.token_id(t) for t in phrase_tokens(p)] for p in prompt.phrases]


def standard_prompts(classes: ClassList = DRIVING_CLASSES) -> list[Prompt]:
    """Every built-in prompt for the benchmark class list."""
    out = [source_prompt(classes)]
    out += [domain_prompt(tag, classes) for tag in TARGET_DOMAINS]
    out.append(build_general_prompt(classes))
    out += [build_unrelated_prompt(classes, v) for v in sorted(UNRELATED_VARIANTS)]
    return out


def benchmark_vocabulary(classes: ClassList = DRIVING_CLASSES) -> Vocabulary:
    """Vocabulary covering every standard prompt for ``classes``."""
    phrases: list[str] = []
    for p in standard_prompts(classes):
        phrases.extend(p.phrases)
    return Vocabulary.build(phrases)


def save_prompt(prompt: Prompt, path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(prompt.to_json(), fh, indent=2, sort_keys=True)
        fh.write("\n")


def load_prompt(path) -> Prompt:
    try:
        with open(path, "r", encoding="utf-8") as fh:
            obj = json.load(fh)
    except (OSError, json.JSONDecodeError) as exc:
        raise ParseError(f"cannot read prompt file {path}: {exc}") from exc
    return Prompt.from_json(obj)
