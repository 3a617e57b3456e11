# models/manifest.py
import os
from dataclasses import dataclass, field, replace

import yaml

from backend.app.utils.error_handlers import StorageError

SOURCE = "source"
TARGET = "target"
DOMAINS = (SOURCE, TARGET)


@dataclass(frozen=True)
class ManifestEntry:
    """One sample: features file, optional label raster, domain tag."""
    id: str
    features: str
    label: str = None
    domain: str = TARGET

    @property
    def is_labeled(self):
        return self.label is not None

    def to_dict(self, base_dir=None):
        def rel(path):
            return os.path.relpath(path, base_dir) if base_dir and path else path
        data = {'id': self.id, 'features': rel(self.features), 'domain': self.domain}
        if self.label is not None:
            data['label'] = rel(self.label)
        return data


@dataclass(frozen=True)
class DatasetManifest:
    entries: tuple = field(default_factory=tuple)

    def __post_init__(self):
        entries = tuple(self.entries)
        seen = set()
        for entry in entries:
            if entry.id in seen:
                raise StorageError(f"duplicate id '{entry.id}' in manifest")
            if entry.domain not in DOMAINS:
                raise StorageError(f"entry '{entry.id}' has unknown domain '{entry.domain}'")
            seen.add(entry.id)
        object.__setattr__(self, "entries", entries)

    def __len__(self):
        return len(self.entries)

    def __iter__(self):
        return iter(self.entries)

    @property
    def ids(self):
        return [entry.id for entry in self.entries]

    def get(self, image_id):
        for entry in self.entries:
            if entry.id == image_id:
                return entry
        raise StorageError(f"id '{image_id}' not in manifest")

    def by_id(self):
        return {entry.id: entry for entry in self.entries}

    def labeled(self):
        return DatasetManifest(tuple(e for e in self.entries if e.is_labeled))

    def unlabeled(self):
        return DatasetManifest(tuple(e for e in self.entries if not e.is_labeled))

    def domain(self, domain):
        return DatasetManifest(tuple(e for e in self.entries if e.domain == domain))

    def subset(self, ids):
        wanted = set(ids)
        return DatasetManifest(tuple(e for e in self.entries if e.id in wanted))

    def with_labels(self, labels):
        """Return a copy where ids in `labels` point at the given label paths."""
        return DatasetManifest(tuple(
            replace(e, label=labels[e.id]) if e.id in labels else e for e in self.entries
        ))

    def merge(self, other):
        return DatasetManifest(self.entries + tuple(other.entries))

    def to_dict(self, base_dir=None):
        return {'entries': [entry.to_dict(base_dir) for entry in self.entries]}

    @classmethod
    def from_dict(cls, data, base_dir=None, check_files=True):
        if not isinstance(data, dict) or not isinstance(data.get('entries'), list):
            raise StorageError("manifest must contain an 'entries' list")

        def resolve(path):
            if path is None:
                return None
            path = str(path)
            return os.path.normpath(os.path.join(base_dir, path)) if base_dir else path

        entries = []
        for raw in data['entries']:
            if not isinstance(raw, dict) or 'id' not in raw or 'features' not in raw:
                raise StorageError(f"malformed manifest entry: {raw!r}")
            entry = ManifestEntry(
                id=str(raw['id']),
                features=resolve(raw['features']),
                label=resolve(raw.get('label')),
                domain=raw.get('domain', TARGET),
            )
            entries.append(entry)
        manifest = cls(tuple(entries))
        if check_files:
            manifest.check_files()
        return manifest

    def check_files(self):
        for entry in self.entries:
            for path in (entry.features, entry.label):
                if path is not None and not os.path.exists(path):
                    raise StorageError(f"entry '{entry.id}' references missing file '{path}'")
        return self


def load_manifest(path, check_files=True):
    """
    Load a YAML dataset manifest

    Args:
        path (str): manifest file; relative entry paths resolve against its directory
        check_files (bool): verify every referenced file exists

    Returns:
        DatasetManifest: validated manifest with absolute paths
    """
    try:
        with open(path) as handle:
            data = yaml.safe_load(handle)
    except OSError as e:
        raise StorageError(f"cannot read manifest '{path}': {e.strerror or e}") from e
    except yaml.YAMLError as e:
        raise StorageError(f"manifest '{path}' is not valid YAML: {e}") from e
    base_dir = os.path.dirname(os.path.abspath(path))
    return DatasetManifest.from_dict(data, base_dir=base_dir, check_files=check_files)


def save_manifest(path, manifest, force=True):
    """Write a manifest with entry paths relative to its own directory."""
    if not force and os.path.exists(path):
        raise StorageError(f"refusing to overwrite '{path}' (use --force)")
    base_dir = os.path.dirname(os.path.abspath(path))
    os.makedirs(base_dir, exist_ok=True)
    try:
        with open(path, "w") as handle:
            yaml.safe_dump(manifest.to_dict(base_dir), handle, sort_keys=False)
    except OSError as e:
        raise StorageError(f"cannot write manifest '{path}': {e.strerror or e}") from e
    return path
