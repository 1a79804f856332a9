"""Phoneme inventory: raw IPA symbol streams mapped onto a fixed class
set, plus an optional broad-group reduction.

The shipped default inventory has 65 classes. It keeps the palatalized
consonants (tʲ, nʲ, rʲ), the length-marked vowels (a:, e:, i:, o:, u:)
and the common affricates (ts, tʃ, dʒ) as distinct classes, merges rare
symbols into frequent neighbours (ɐ → a, ç → k, pf → f, ...), and fills
the remainder from the common IPA core. The broad-group table reduces
the 65 classes to 15 groups.
"""

from dataclasses import dataclass, field
from importlib import resources

from .errors import InventoryError

BLANK_SYMBOL = "<blank>"


@dataclass
class PhonemeInventory:
    classes: list                    # canonical symbols, index = class id
    mapping: dict                    # raw symbol -> class id (total)
    groups: dict = None              # class id -> group id (optional)
    group_names: list = None

    @property
    def num_classes(self):
        return len(self.classes)

    @property
    def blank_id(self):
        return len(self.classes)

    def symbol(self, class_id):
        if class_id == self.blank_id:
            return BLANK_SYMBOL
        return self.classes[class_id]

    def class_of(self, symbol):
        if symbol not in self.mapping:
            raise InventoryError(f"unknown phoneme symbol {symbol!r}")
        return self.mapping[symbol]


def default_inventory_path():
    return str(resources.files("winpho").joinpath("assets/inventory.tsv"))


def default_groups_path():
    return str(resources.files("winpho").joinpath("assets/groups.tsv"))


def load_inventory(path, groups_path=None):
    """Parse a ``raw<TAB>canonical`` table (UTF-8, ``#`` comments).

    Class ids follow first appearance of each canonical symbol; every
    canonical must map to itself somewhere in the file.
    """
    classes = []
    class_ids = {}
    mapping = {}
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.strip()
            if not line or line.startswith("#"):
                continue
            parts = line.split("\t")
            if len(parts) != 2 or not parts[0] or not parts[1]:
                raise InventoryError(f"{path}:{lineno}: expected 'raw<TAB>canonical'")
            raw, canonical = parts
            if raw in mapping:
                raise InventoryError(f"{path}:{lineno}: duplicate raw symbol {raw!r}")
            if canonical not in class_ids:
                class_ids[canonical] = len(classes)
                classes.append(canonical)
            mapping[raw] = class_ids[canonical]
    if not classes:
        raise InventoryError(f"{path}: empty inventory")
    for canonical in classes:
        if canonical not in mapping:
            raise InventoryError(
                f"{path}: canonical class {canonical!r} never maps to itself")

    inv = PhonemeInventory(classes=classes, mapping=mapping)
    if groups_path is not None:
        load_groups(inv, groups_path)
    return inv


def load_groups(inv, path):
    """Attach a ``canonical<TAB>group`` table covering every class."""
    groups = {}
    names = []
    name_ids = {}
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.strip()
            if not line or line.startswith("#"):
                continue
            parts = line.split("\t")
            if len(parts) != 2:
                raise InventoryError(f"{path}:{lineno}: expected 'canonical<TAB>group'")
            canonical, group = parts
            if canonical not in inv.mapping or inv.classes[inv.mapping[canonical]] != canonical:
                raise InventoryError(f"{path}:{lineno}: {canonical!r} is not a class")
            if group not in name_ids:
                name_ids[group] = len(names)
                names.append(group)
            cid = inv.mapping[canonical]
            if cid in groups:
                raise InventoryError(f"{path}:{lineno}: class {canonical!r} grouped twice")
            groups[cid] = name_ids[group]
    missing = [c for i, c in enumerate(inv.classes) if i not in groups]
    if missing:
        raise InventoryError(f"{path}: classes without a group: {missing}")
    inv.groups = groups
    inv.group_names = names
    return inv


def load_default_inventory(with_groups=True):
    return load_inventory(default_inventory_path(),
                          default_groups_path() if with_groups else None)


def map_sequence(tokens, inv, strict=True, fallback=None):
    """Map raw symbol tokens to class ids.

    Adjacent token pairs are first tried as a joined symbol (longest
    match wins) so affricates split across tokens, e.g. [p, f], resolve
    like the fused form. Returns (ids, unknown_count); unknown symbols
    raise in strict mode, otherwise map to ``fallback`` and are counted.

    The only length-changing case is a two-token merge.
    """
    if not strict and fallback is None:
        raise InventoryError("lenient mapping requires a fallback symbol")
    fallback_id = inv.class_of(fallback) if fallback is not None else None

    ids = []
    unknown = 0
    i = 0
    while i < len(tokens):
        if i + 1 < len(tokens) and tokens[i] + tokens[i + 1] in inv.mapping:
            ids.append(inv.mapping[tokens[i] + tokens[i + 1]])
            i += 2
            continue
        tok = tokens[i]
        if tok in inv.mapping:
            ids.append(inv.mapping[tok])
        elif strict:
            raise InventoryError(f"unknown phoneme symbol {tok!r} (strict mode)")
        else:
            ids.append(fallback_id)
            unknown += 1
        i += 1
    return ids, unknown


def reduce_to_groups(seq, inv):
    """Project class ids onto broad-group ids. Idempotent for sequences
    already expressed as group ids is not meaningful; group ids are a
    separate, smaller id space."""
    if inv.groups is None:
        raise InventoryError("inventory has no broad-group table")
    return [inv.groups[c] for c in seq]


def subset(inv, n_classes):
    """Inventory restricted to the first ``n_classes`` classes, keeping
    every raw mapping that lands inside the subset."""
    if not 1 <= n_classes <= inv.num_classes:
        raise InventoryError(f"cannot take {n_classes} of {inv.num_classes} classes")
    classes = inv.classes[:n_classes]
    keep = set(range(n_classes))
    mapping = {raw: cid for raw, cid in inv.mapping.items() if cid in keep}
    groups = None
    if inv.groups is not None:
        groups = {cid: g for cid, g in inv.groups.items() if cid in keep}
    return PhonemeInventory(classes=classes, mapping=mapping, groups=groups,
                            group_names=inv.group_names)


def save_inventory(inv, path):
    """Write the inventory back out in the canonical TSV layout:
    identity lines first (class order), then the extra raw mappings."""
    with open(path, "w", encoding="utf-8") as fh:
        fh.write("# raw<TAB>canonical\n")
        for c in inv.classes:
            fh.write(f"{c}\t{c}\n")
        for raw in sorted(inv.mapping):
            if raw not in inv.classes:
                fh.write(f"{raw}\t{inv.classes[inv.mapping[raw]]}\n")
