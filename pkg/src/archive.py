"""
Client for the public recordings archive JSON API.

Downloads audio files for a species query into a directory and keeps a
manifest of what has been fetched. Re-running a fetch skips recordings that
are already on disk.
"""

import logging
import re
import time
from pathlib import Path
from typing import Dict, Any, List, Optional, Callable

import requests

from .audio_io import load_manifest, save_manifest
from .config import ArchiveConfig
from .errors import NetworkError, ApiSchemaChanged
from .models import Category, DatasetManifest, RecordingEntry

logger = logging.getLogger(__name__)

MANIFEST_NAME = 'manifest.csv'
REQUIRED_FIELDS = ('id', 'file', 'file-name')


class ArchiveClient:
    """Rate-limited HTTP access to the archive"""

    def __init__(self, config: Optional[ArchiveConfig] = None, session: Optional[requests.Session] = None,
                 sleep: Callable[[float], None] = time.sleep, clock: Callable[[], float] = time.monotonic):
        self.config = config or ArchiveConfig()
        self.session = session or requests.Session()
        self._sleep = sleep
        self._clock = clock
        self._last_request: Optional[float] = None

    def _wait_turn(self):
        if self._last_request is not None:
            remaining = self.config.request_interval_s - (self._clock() - self._last_request)
            if remaining > 0:
                self._sleep(remaining)
        self._last_request = self._clock()

    def _get(self, url: str, **kwargs) -> requests.Response:
        self._wait_turn()
        try:
            response = self.session.get(url, timeout=self.config.timeout_s, **kwargs)
            response.raise_for_status()
        except requests.RequestException as e:
            raise NetworkError(f"Request to {url} failed: {str(e)}") from e
        return response

    def search(self, query: str, page: int = 1) -> Dict[str, Any]:
        """One page of search results"""
        if self.config.quality:
            query = f"{query} q:{self.config.quality}"
        url = f"{self.config.base_url}/api/2/recordings"
        logger.info(f"Querying archive for {query!r}, page {page}")
        response = self._get(url, params={'query': query, 'page': page})
        try:
            payload = response.json()
        except ValueError as e:
            raise ApiSchemaChanged(f"Archive returned non-JSON content for {query!r}") from e
        if not isinstance(payload, dict) or not isinstance(payload.get('recordings'), list):
            raise ApiSchemaChanged("Archive response has no 'recordings' array")
        return payload

    def download(self, url: str, destination: Path):
        """Fetch one audio file, written via a temporary name"""
        if url.startswith('//'):
            url = f"https:{url}"
        response = self._get(url)
        tmp = destination.with_name(destination.name + '.part')
        tmp.write_bytes(response.content)
        tmp.replace(destination)


def parse_duration(text: Any) -> float:
    """Archive lengths look like 'm:ss' or 'h:mm:ss'"""
    if text is None or str(text).strip() == '':
        return 0.0
    seconds = 0.0
    for part in str(text).strip().split(':'):
        seconds = seconds * 60 + float(part)
    return seconds


def category_of(record_type: Any) -> Category:
    text = str(record_type or '').lower()
    if 'song' in text:
        return Category.SONG
    if 'call' in text:
        return Category.CALL
    return Category.OTHER


def entry_from_record(record: Dict[str, Any]) -> RecordingEntry:
    """Map one archive record onto a manifest entry"""
    missing = [name for name in REQUIRED_FIELDS if name not in record]
    if missing:
        raise ApiSchemaChanged(f"Archive record is missing fields {missing}")
    label = str(record.get('en') or '').strip()
    if not label:
        if 'gen' not in record or 'sp' not in record:
            raise ApiSchemaChanged(f"Archive record {record.get('id')} has no species name fields")
        label = f"{record['gen']} {record['sp']}".strip()
    extension = str(record['file-name']).rsplit('.', 1)[-1].lower() if '.' in str(record['file-name']) else 'mp3'
    recording_id = f"XC{record['id']}"
    also = record.get('also') or []
    if isinstance(also, str):
        also = [a for a in re.split(r'[;,]', also) if a.strip()]
    return RecordingEntry(
        id=recording_id,
        species_label=label,
        category=category_of(record.get('type')),
        file_path=f"{recording_id}.{extension}",
        duration_s=parse_duration(record.get('length')),
        secondary_labels=tuple(str(a).strip() for a in also if str(a).strip()),
    )


def fetch_recordings(query: str, dest: Path, limit: int, config: Optional[ArchiveConfig] = None,
                     client: Optional[ArchiveClient] = None) -> List[RecordingEntry]:
    """Download up to `limit` recordings matching `query` into `dest`.

    Returns the manifest entries for every matching recording that is on
    disk after the call, whether newly downloaded or already present. The
    manifest is saved after each download, so a NetworkError or
    ApiSchemaChanged raised part way leaves a valid manifest behind.
    """
    dest = Path(dest)
    if limit <= 0:
        logger.info(f"Fetch limit is {limit}, nothing to do for {query!r}")
        return []
    dest.mkdir(parents=True, exist_ok=True)
    manifest_path = dest / MANIFEST_NAME
    manifest = load_manifest(manifest_path) if manifest_path.exists() else DatasetManifest(root=dest)
    client = client or ArchiveClient(config)

    fetched: List[RecordingEntry] = []
    downloaded = 0
    page = 1
    while len(fetched) < limit:
        payload = client.search(query, page)
        records = payload['recordings']
        for record in records:
            if len(fetched) >= limit:
                break
            entry = entry_from_record(record)
            target = dest / entry.file_path
            existing = manifest.get(entry.id)
            if existing is not None and manifest.resolve(existing).exists():
                logger.debug(f"{entry.id} already downloaded, skipping")
                fetched.append(existing)
                continue
            logger.info(f"Downloading {entry.id} ({entry.species_label}) to {target}")
            client.download(str(record['file']), target)
            manifest = _with_entry(manifest, entry)
            save_manifest(manifest, manifest_path)
            fetched.append(entry)
            downloaded += 1
        num_pages = int(payload.get('numPages', page) or page)
        if not records or page >= num_pages:
            break
        page += 1

    logger.info(f"Fetch for {query!r} finished: {downloaded} new, {len(fetched) - downloaded} already present")
    return fetched


def _with_entry(manifest: DatasetManifest, entry: RecordingEntry) -> DatasetManifest:
    entries = [e for e in manifest.entries if e.id != entry.id] + [entry]
    class_table = list(manifest.class_table)
    if entry.species_label not in class_table:
        class_table.append(entry.species_label)
    return DatasetManifest(entries, class_table, manifest.root)
