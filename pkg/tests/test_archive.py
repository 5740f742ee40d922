"""
Archive client tests. HTTP is mocked; nothing here touches the network.
"""

from unittest.mock import MagicMock

import pytest
import requests

from src.archive import ArchiveClient, category_of, entry_from_record, fetch_recordings, parse_duration
from src.audio_io import load_manifest
from src.config import ArchiveConfig
from src.errors import ApiSchemaChanged, NetworkError
from src.models import Category

pytestmark = pytest.mark.unit


def record(n: int, name: str = 'Grey Butcherbird', **extra):
    return {'id': str(n), 'en': name, 'gen': 'Cracticus', 'sp': 'torquatus', 'type': 'song',
            'file': f"//archive.example/{n}/download", 'file-name': f"XC{n}-call.wav", 'length': '0:42',
            'also': ['Magpie-lark'], **extra}


def response(json_data=None, content=b'', status_error=None):
    mock = MagicMock()
    mock.json.return_value = json_data
    mock.content = content
    if status_error is not None:
        mock.raise_for_status.side_effect = status_error
    return mock


def make_session(pages, fail_downloads=()):
    """Session whose search pages and downloads are canned; fail_downloads lists record ids"""
    session = MagicMock()

    def get(url, timeout=None, params=None):
        if url.endswith('/api/2/recordings'):
            return response(pages[params['page'] - 1])
        record_id = url.split('/')[-2]
        if record_id in fail_downloads:
            raise requests.ConnectionError("connection reset")
        return response(content=f"audio-{record_id}".encode())

    session.get.side_effect = get
    return session


@pytest.fixture
def client_for():
    """Build an ArchiveClient around a canned session with a frozen clock"""
    sleeps = []

    def _build(pages, fail_downloads=(), quality=None):
        config = ArchiveConfig(base_url='https://archive.example', quality=quality)
        client = ArchiveClient(config, make_session(pages, fail_downloads), sleep=sleeps.append,
                               clock=lambda: 100.0)
        client.sleeps = sleeps
        return client

    return _build


class TestRecordParsing:
    """Mapping archive JSON onto manifest entries"""

    def test_entry_from_record(self):
        entry = entry_from_record(record(7))
        assert entry.id == 'XC7'
        assert entry.species_label == 'Grey Butcherbird'
        assert entry.category == Category.SONG
        assert entry.file_path == 'XC7.wav'
        assert entry.duration_s == 42.0
        assert entry.secondary_labels == ('Magpie-lark',)

    def test_scientific_name_when_english_name_is_blank(self):
        assert entry_from_record(record(7, name='')).species_label == 'Cracticus torquatus'

    def test_missing_required_field_is_a_schema_change(self):
        broken = record(7)
        del broken['file']
        with pytest.raises(ApiSchemaChanged):
            entry_from_record(broken)

    @pytest.mark.parametrize('text,seconds', [('0:42', 42.0), ('1:05', 65.0), ('1:00:01', 3601.0), ('', 0.0)])
    def test_parse_duration(self, text, seconds):
        assert parse_duration(text) == seconds

    def test_category_of(self):
        assert category_of('alarm call') == Category.CALL
        assert category_of('song, call') == Category.SONG
        assert category_of(None) == Category.OTHER


class TestFetchRecordings:
    """Downloading into a directory with a resumable manifest"""

    def test_limit_zero_does_nothing(self, tmp_path, client_for):
        client = client_for([])
        assert fetch_recordings('wren', tmp_path / 'd', 0, client=client) == []
        client.session.get.assert_not_called()
        assert not (tmp_path / 'd').exists()

    def test_downloads_up_to_limit_and_writes_manifest(self, tmp_path, client_for):
        pages = [{'numPages': 1, 'recordings': [record(1), record(2), record(3)]}]
        entries = fetch_recordings('Grey Butcherbird', tmp_path, 2, client=client_for(pages))
        assert [e.id for e in entries] == ['XC1', 'XC2']
        assert (tmp_path / 'XC1.wav').read_bytes() == b'audio-1'
        assert not list(tmp_path.glob('*.part'))
        assert load_manifest(tmp_path / 'manifest.csv').ids == ['XC1', 'XC2']

    def test_protocol_relative_urls_get_https(self, tmp_path, client_for):
        client = client_for([{'numPages': 1, 'recordings': [record(1)]}])
        fetch_recordings('x', tmp_path, 1, client=client)
        urls = [c.args[0] for c in client.session.get.call_args_list]
        assert 'https://archive.example/1/download' in urls

    def test_follows_pages(self, tmp_path, client_for):
        pages = [{'numPages': 2, 'recordings': [record(1)]}, {'numPages': 2, 'recordings': [record(2)]}]
        entries = fetch_recordings('x', tmp_path, 5, client=client_for(pages))
        assert [e.id for e in entries] == ['XC1', 'XC2']

    def test_second_run_skips_existing_files(self, tmp_path, client_for):
        pages = [{'numPages': 1, 'recordings': [record(1), record(2)]}]
        fetch_recordings('x', tmp_path, 2, client=client_for(pages))
        client = client_for(pages)
        entries = fetch_recordings('x', tmp_path, 2, client=client)
        assert [e.id for e in entries] == ['XC1', 'XC2']
        # Only the search request, no downloads
        assert client.session.get.call_count == 1

    def test_network_error_leaves_valid_manifest(self, tmp_path, client_for):
        pages = [{'numPages': 1, 'recordings': [record(1), record(2)]}]
        with pytest.raises(NetworkError):
            fetch_recordings('x', tmp_path, 2, client=client_for(pages, fail_downloads=('2',)))
        assert load_manifest(tmp_path / 'manifest.csv').ids == ['XC1']
        assert not (tmp_path / 'XC2.wav').exists()

    def test_http_error_is_a_network_error(self, tmp_path):
        session = MagicMock()
        session.get.return_value = response(status_error=requests.HTTPError("503"))
        client = ArchiveClient(ArchiveConfig(), session, sleep=lambda s: None)
        with pytest.raises(NetworkError):
            fetch_recordings('x', tmp_path, 1, client=client)

    def test_missing_recordings_array_is_a_schema_change(self, tmp_path, client_for):
        with pytest.raises(ApiSchemaChanged):
            fetch_recordings('x', tmp_path, 1, client=client_for([{'numPages': 1}]))

    def test_requests_are_spaced_by_the_interval(self, tmp_path, client_for):
        client = client_for([{'numPages': 1, 'recordings': [record(1), record(2)]}])
        fetch_recordings('x', tmp_path, 2, client=client)
        # Three requests against a frozen clock: every one after the first waits a full interval
        assert client.sleeps == [1.0, 1.0]

    def test_quality_filter_is_added_to_the_query(self, tmp_path, client_for):
        client = client_for([{'numPages': 1, 'recordings': []}], quality='A')
        fetch_recordings('wren', tmp_path, 1, client=client)
        params = client.session.get.call_args_list[0].kwargs['params']
        assert params['query'] == 'wren q:A'
