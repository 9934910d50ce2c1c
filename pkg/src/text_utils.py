import re
from typing import FrozenSet, List

# Han, kana and hangul blocks are counted one character per word.
CJK_RANGES = "\u3400-\u4dbf\u4e00-\u9fff\uf900-\ufaff\u3040-\u30ff\uac00-\ud7af"

_CJK_CHAR = re.compile(f"[{CJK_RANGES}]")
_TOKEN = re.compile(f"[{CJK_RANGES}]|[^\\W_{CJK_RANGES}]+")
_NON_CJK_RUN = re.compile(f"[^{CJK_RANGES}]+")


def normalize_tokens(text: str) -> List[str]:
    return _TOKEN.findall(text.lower())


def token_set(text: str) -> FrozenSet[str]:
    return frozenset(normalize_tokens(text))


def count_words(text: str) -> int:
    count = 0
    for chunk in text.split():
        count += len(_CJK_CHAR.findall(chunk))
        count += len(_NON_CJK_RUN.findall(chunk))
    return count


def jaccard(a: FrozenSet[str], b: FrozenSet[str]) -> float:
    if not a and not b:
        return 1.0
    union = len(a | b)
    return len(a & b) / union
