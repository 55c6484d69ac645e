"""Hint definitions, exclusion rules, and pruned hintset enumeration.

The optimizer exposes a small set of named hints, each of which can be
turned on or off, giving 2^n raw combinations. Most combinations are
either contradictory (two pinned join algorithms) or meaningless, so a
RuleSet prunes the power set down to a fixed catalog of hintsets. The
shipped default config emits exactly 225 hintsets over 15 hints.
"""

from __future__ import annotations

import enum
import hashlib
from dataclasses import dataclass, field

import numpy as np

from .errors import RuleReferencesUnknownHint


class HintCategory(enum.Enum):
    JOIN = "Join"
    LOGICAL = "LogicalEnumeration"


@dataclass(frozen=True)
class Hint:
    id: int
    name: str
    category: HintCategory


@dataclass(frozen=True)
class HintSet:
    """One catalog entry: a rule-valid combination of enabled hints."""

    id: int
    enabled: int  # bitmask over hint ids

    def hint_ids(self) -> list[int]:
        return [i for i in range(self.enabled.bit_length()) if self.enabled >> i & 1]


@dataclass(frozen=True)
class MaxEnabled:
    """At most `limit` enabled hints in `category` (None = any category)."""

    category: HintCategory | None
    limit: int


@dataclass(frozen=True)
class ExclusiveFamilies:
    """Enabled hints must all come from at most one of these families.

    Hints outside every family are unconstrained. This is the same
    machinery as `RuleSet.independent_groups` applied a second time to a
    different partition of the hints.
    """

    families: tuple[tuple[int, ...], ...]


PruneFilter = MaxEnabled | ExclusiveFamilies


@dataclass
class RuleSet:
    mutual_exclusions: list[tuple[int, int]] = field(default_factory=list)
    independent_groups: list[tuple[int, ...]] = field(default_factory=list)
    extra_pruning: list[PruneFilter] = field(default_factory=list)

    def referenced_ids(self) -> set[int]:
        ids: set[int] = set()
        for a, b in self.mutual_exclusions:
            ids.update((a, b))
        for group in self.independent_groups:
            ids.update(group)
        for filt in self.extra_pruning:
            if isinstance(filt, ExclusiveFamilies):
                for fam in filt.families:
                    ids.update(fam)
        return ids


def _check_rule_ids(hints: list[Hint], rules: RuleSet) -> None:
    known = {h.id for h in hints}
    unknown = rules.referenced_ids() - known
    if unknown:
        raise RuleReferencesUnknownHint(f"rules reference unknown hint ids {sorted(unknown)}")


def _group_mask(ids) -> int:
    mask = 0
    for i in ids:
        mask |= 1 << i
    return mask


def validate(hintset: HintSet | int, rules: RuleSet, hints: list[Hint]) -> bool:
    """True iff every rule (including extra pruning) holds for the mask."""
    _check_rule_ids(hints, rules)
    mask = hintset.enabled if isinstance(hintset, HintSet) else int(hintset)
    for a, b in rules.mutual_exclusions:
        if mask >> a & 1 and mask >> b & 1:
            return False
    active = sum(1 for g in rules.independent_groups if mask & _group_mask(g))
    if active > 1:
        return False
    by_category = {c: _group_mask(h.id for h in hints if h.category is c) for c in HintCategory}
    all_mask = _group_mask(h.id for h in hints)
    for filt in rules.extra_pruning:
        if isinstance(filt, MaxEnabled):
            scope = all_mask if filt.category is None else by_category[filt.category]
            if (mask & scope).bit_count() > filt.limit:
                return False
        else:
            active = sum(1 for fam in filt.families if mask & _group_mask(fam))
            if active > 1:
                return False
    return True


def enumerate_hintsets(hints: list[Hint], rules: RuleSet) -> list[HintSet]:
    """Every rule-satisfying bitmask, ascending, ids assigned in order.

    The all-zero mask satisfies any RuleSet and therefore always lands at
    id 0, which keeps "no-hint" comparisons index-stable. Vectorized over
    the full power set; n is small by construction (15 in the default
    catalog) so 2^n stays cheap.
    """
    if not hints:
        raise ValueError("hints must be nonempty")
    _check_rule_ids(hints, rules)
    n = max(h.id for h in hints) + 1
    ids = sorted(h.id for h in hints)
    if ids != list(range(n)) or len(set(h.id for h in hints)) != len(hints):
        raise ValueError("hint ids must be unique and dense starting at 0")
    if n > 24:
        raise ValueError(f"refusing to enumerate 2^{n} masks")

    masks = np.arange(1 << n, dtype=np.int64)
    keep = np.ones(masks.shape, dtype=bool)

    def popcount(x):
        return np.bitwise_count(x) if hasattr(np, "bitwise_count") else np.unpackbits(
            x.astype(">u8").view(np.uint8).reshape(-1, 8), axis=1).sum(axis=1)

    for a, b in rules.mutual_exclusions:
        pair = (1 << a) | (1 << b)
        keep &= (masks & pair) != pair

    def at_most_one_active(groups):
        active = np.zeros(masks.shape, dtype=np.int64)
        for g in groups:
            active += (masks & _group_mask(g)) != 0
        return active <= 1

    if rules.independent_groups:
        keep &= at_most_one_active(rules.independent_groups)

    by_category = {c: _group_mask(h.id for h in hints if h.category is c) for c in HintCategory}
    all_mask = _group_mask(h.id for h in hints)
    for filt in rules.extra_pruning:
        if isinstance(filt, MaxEnabled):
            scope = all_mask if filt.category is None else by_category[filt.category]
            keep &= popcount(masks & scope) <= filt.limit
        else:
            keep &= at_most_one_active(filt.families)

    kept = masks[keep]
    return [HintSet(id=i, enabled=int(m)) for i, m in enumerate(kept)]


class HintCatalog:
    """Immutable bundle of hints, rules, and the enumerated hintsets."""

    def __init__(self, hints: list[Hint], rules: RuleSet):
        self.hints = sorted(hints, key=lambda h: h.id)
        self.rules = rules
        self.hintsets = enumerate_hintsets(self.hints, rules)
        self.by_name = {h.name: h for h in self.hints}
        self._names = {h.id: h.name for h in self.hints}
        self.digest = self._digest()

    def __len__(self) -> int:
        return len(self.hintsets)

    def enabled_names(self, hintset: HintSet | int) -> frozenset[str]:
        hs = hintset if isinstance(hintset, HintSet) else self.hintsets[hintset]
        return frozenset(self._names[i] for i in hs.hint_ids())

    def _digest(self) -> str:
        h = hashlib.blake2b(digest_size=8)
        for hint in self.hints:
            h.update(f"{hint.id}:{hint.name}:{hint.category.value};".encode())
        for mask in self.hintsets:
            h.update(mask.enabled.to_bytes(4, "little"))
        return h.hexdigest()


def parse_hints_cfg(text: str) -> HintCatalog:
    """Parse the `hints.cfg` format.

    Hint lines come first (`id name category`), then rule stanzas:
    `exclude a b`, `group g: a b`, and `prune <filter>` where the filter
    is `max-enabled <category|all> <k>` or `family <name>: h1 h2 ...`.
    Hints in stanzas may be written by name or by id.
    """
    hints: list[Hint] = []
    exclusions: list[tuple[int, int]] = []
    groups: list[tuple[int, ...]] = []
    max_enabled: list[MaxEnabled] = []
    families: list[tuple[int, ...]] = []
    by_name: dict[str, int] = {}

    def resolve(token: str) -> int:
        if token in by_name:
            return by_name[token]
        try:
            return int(token)
        except ValueError:
            raise RuleReferencesUnknownHint(f"unknown hint {token!r}") from None

    for raw in text.splitlines():
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        parts = line.split()
        if parts[0] == "exclude":
            if len(parts) != 3:
                raise ValueError(f"bad exclude stanza: {raw!r}")
            exclusions.append((resolve(parts[1]), resolve(parts[2])))
        elif parts[0] == "group":
            _, members = line.split(":", 1)
            groups.append(tuple(resolve(t) for t in members.split()))
        elif parts[0] == "prune":
            if parts[1] == "max-enabled":
                cat = None if parts[2] == "all" else HintCategory(parts[2])
                max_enabled.append(MaxEnabled(cat, int(parts[3])))
            elif parts[1] == "family":
                _, members = line.split(":", 1)
                families.append(tuple(resolve(t) for t in members.split()))
            else:
                raise ValueError(f"unknown prune filter: {raw!r}")
        else:
            if len(parts) != 3:
                raise ValueError(f"bad hint line: {raw!r}")
            hint = Hint(int(parts[0]), parts[1], HintCategory(parts[2]))
            hints.append(hint)
            by_name[hint.name] = hint.id

    extra: list[PruneFilter] = list(max_enabled)
    if families:
        extra.append(ExclusiveFamilies(tuple(families)))
    return HintCatalog(hints, RuleSet(exclusions, groups, extra))


def default_catalog() -> HintCatalog:
    """The shipped 15-hint config, tuned to emit exactly 225 hintsets."""
    from importlib import resources

    text = resources.files("hintsteer.configs").joinpath("hints.cfg").read_text()
    return parse_hints_cfg(text)
