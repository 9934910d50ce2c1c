import re
from dataclasses import dataclass
from pathlib import Path
from typing import Dict, List, Pattern, Tuple

from pydantic import BaseModel, Field, PositiveInt, model_validator

from errors import InputError

BUILTIN_STRUCTURED_PATTERNS: Dict[str, Pattern] = {
    # "A. ... B. ..." option markers, upper-case letters only
    "multiple_choice_markers": re.compile(
        r"(?<![A-Za-z])A\s*[.、．)）]\s*\S.*?(?<![A-Za-z])B\s*[.、．)）]\s*\S", re.DOTALL
    ),
    # fenced block, or two consecutive indented lines
    "code_block": re.compile(r"```|^(?: {4}|\t)\S.*\n(?: {4}|\t)\S", re.MULTILINE),
}


class LanguageVariant(BaseModel):
    copy_paste_keywords: List[str] = Field(default_factory=list)
    copy_paste_keyword_patterns: List[str] = Field(default_factory=list)
    structured_patterns: List[str] = Field(default_factory=list)
    direct_answer_keywords: List[str] = Field(default_factory=list)
    understanding_keywords: List[str] = Field(default_factory=list)


class LexiconConfig(BaseModel):
    copy_paste_keywords: List[str] = Field(default_factory=lambda: ["as follows"])
    copy_paste_keyword_patterns: List[str] = Field(default_factory=lambda: [r"\bquestion\s*\d+"])
    structured_patterns: List[str] = Field(
        default_factory=lambda: ["multiple_choice_markers", "code_block"]
    )
    long_prompt_threshold: PositiveInt = 300
    direct_answer_keywords: List[str] = Field(
        default_factory=lambda: ["give me the answer to", "what is the solution of"]
    )
    understanding_keywords: List[str] = Field(default_factory=lambda: ["how to understand", "why does"])
    languages: Dict[str, LanguageVariant] = Field(
        default_factory=lambda: {
            "zh": LanguageVariant(
                copy_paste_keywords=["如下"],
                copy_paste_keyword_patterns=[r"第\s*\d+\s*[题題]"],
                direct_answer_keywords=["直接给出答案", "答案是什么"],
                understanding_keywords=["怎么理解", "为什么"],
            )
        }
    )

    @model_validator(mode="after")
    def _check_detectors(self) -> "LexiconConfig":
        merged = self.merged()
        if not merged["copy_paste_keywords"] and not merged["copy_paste_keyword_patterns"]:
            raise ValueError("copy-paste keyword lists are empty")
        for name in ("structured_patterns", "direct_answer_keywords", "understanding_keywords"):
            if not merged[name]:
                raise ValueError(f"{name} is empty")
        return self

    def merged(self) -> Dict[str, List[str]]:
        fields = LanguageVariant.model_fields
        out = {name: list(getattr(self, name)) for name in fields}
        for lang in sorted(self.languages):
            variant = self.languages[lang]
            for name in fields:
                out[name].extend(v for v in getattr(variant, name) if v not in out[name])
        return out

    def compile(self) -> "CompiledLexicon":
        merged = self.merged()
        structured = []
        for spec in merged["structured_patterns"]:
            if spec in BUILTIN_STRUCTURED_PATTERNS:
                structured.append(BUILTIN_STRUCTURED_PATTERNS[spec])
            else:
                structured.append(_compile_user_regex(spec))
        return CompiledLexicon(
            copy_paste_keywords=tuple(k.casefold() for k in merged["copy_paste_keywords"]),
            copy_paste_patterns=tuple(
                _compile_user_regex(p, re.IGNORECASE) for p in merged["copy_paste_keyword_patterns"]
            ),
            structured_patterns=tuple(structured),
            long_prompt_threshold=self.long_prompt_threshold,
            direct_answer_keywords=tuple(k.casefold() for k in merged["direct_answer_keywords"]),
            understanding_keywords=tuple(k.casefold() for k in merged["understanding_keywords"]),
        )


def _compile_user_regex(pattern: str, flags: int = 0) -> Pattern:
    try:
        return re.compile(pattern, flags)
    except re.error as e:
        raise InputError(f"bad lexicon pattern {pattern!r}: {e}") from e


@dataclass(frozen=True)
class CompiledLexicon:
    copy_paste_keywords: Tuple[str, ...]
    copy_paste_patterns: Tuple[Pattern, ...]
    structured_patterns: Tuple[Pattern, ...]
    long_prompt_threshold: int
    direct_answer_keywords: Tuple[str, ...]
    understanding_keywords: Tuple[str, ...]

    def has_copy_paste_keyword(self, text: str) -> bool:
        folded = text.casefold()
        return any(k in folded for k in self.copy_paste_keywords) or any(
            p.search(text) for p in self.copy_paste_patterns
        )

    def has_structured_text(self, text: str) -> bool:
        return any(p.search(text) for p in self.structured_patterns)

    def asks_direct_answer(self, text: str) -> bool:
        folded = text.casefold()
        return any(k in folded for k in self.direct_answer_keywords)

    def asks_understanding(self, text: str) -> bool:
        folded = text.casefold()
        return any(k in folded for k in self.understanding_keywords)


def load_lexicon(path: Path) -> LexiconConfig:
    try:
        raw = Path(path).read_text(encoding="utf-8")
    except FileNotFoundError as e:
        raise InputError(f"lexicon file not found: {path}") from e
    return LexiconConfig.model_validate_json(raw)
