from pathlib import Path

import numpy as np
import pytest

from opseq import corpus
from opseq.errors import (
    ConfigError,
    EmptySampleError,
    InsufficientDataError,
)

FIXTURES = Path(__file__).parent / "fixtures"

# Sample counts per family from the reference malware dataset; used to
# exercise the grouping rules on realistic numbers.
FAMILY_COUNTS = {
    "Adload": 1044, "Agent": 817, "Alureon": 1327, "BHO": 1159,
    "CeeInject": 886, "Cycbot": 1029, "DelfInject": 1097, "Fakerean": 1063,
    "Hotbar": 1476, "Lolyda": 915, "Obfuscator": 1331, "Onlinegames": 1284,
    "Rbot": 817, "Renos": 1309, "Starpage": 1084, "Vobfus": 924,
    "Vundo": 1784, "Winwebsec": 3651, "Zbot": 1785, "Zeroacess": 1119,
}


class TestParseDisassembly:
    def test_plain_mnemonic_lines(self):
        ops = corpus.parse_disassembly("mov\npush\nret\n")
        assert ops == ["mov", "push", "ret"]

    def test_operands_ignored(self):
        ops = corpus.parse_disassembly("mov eax, ebx\nlea ecx, [edx+4]\n")
        assert ops == ["mov", "lea"]

    def test_listing_layout_with_addresses_and_bytes(self):
        text = ("401000: 55        push ebp\n"
                "401001: 8b ec     mov ebp, esp\n"
                "0x401003: 83 c4 08 add esp, 8\n")
        assert corpus.parse_disassembly(text) == ["push", "mov", "add"]

    def test_comments_and_blanks_skipped(self):
        text = "; header\n\nmov eax, 1\n# note\n   \nret\n"
        assert corpus.parse_disassembly(text) == ["mov", "ret"]

    def test_case_folded(self):
        assert corpus.parse_disassembly("MOV EAX, 1\nRet\n") == ["mov", "ret"]

    def test_hex_looking_mnemonics_survive(self):
        # add/dec/fadd consist only of hex characters but must not be
        # mistaken for address or byte columns
        text = "add eax, 1\ndec ecx\nfadd st0, st1\nadc eax, ebx\n"
        assert corpus.parse_disassembly(text) == ["add", "dec", "fadd", "adc"]

    def test_long_hex_run_skipped(self):
        assert corpus.parse_disassembly("deadbeef01 mov eax, 1\n") == ["mov"]

    def test_empty_input_names_source(self):
        with pytest.raises(EmptySampleError, match="sample7"):
            corpus.parse_disassembly("; nothing\n\n", name="sample7")

    def test_numbers_only_is_empty(self):
        with pytest.raises(EmptySampleError):
            corpus.parse_disassembly("12345\n42\n")


class TestVocab:
    def test_ranking_descending_with_lexicographic_ties(self):
        seqs = [["mov", "mov", "push", "ret", "push", "xor"]]
        vocab = corpus.build_vocab(seqs, K=3)
        # mov=2, push=2 tie broken lexicographically, then ret/xor at 1
        assert vocab.ranked == [("mov", 2), ("push", 2), ("ret", 1)]
        assert vocab.id_of("mov") == 1
        assert vocab.id_of("push") == 2

    def test_sizes(self):
        vocab = corpus.build_vocab([["a", "b", "c"]], K=2)
        assert vocab.K == 2
        assert vocab.other_id == 3
        assert vocab.vocab_size == 4

    def test_fewer_distinct_than_k(self):
        vocab = corpus.build_vocab([["mov", "ret"]], K=30)
        assert vocab.K == 2

    def test_unknown_maps_to_other(self):
        vocab = corpus.build_vocab([["mov"]], K=1)
        assert vocab.id_of("imaginary") == vocab.other_id

    def test_bad_k(self):
        with pytest.raises(ConfigError):
            corpus.build_vocab([["mov"]], K=0)

    def test_no_opcodes(self):
        with pytest.raises(EmptySampleError):
            corpus.build_vocab([], K=5)

    def test_counts_across_sequences_accumulate(self):
        vocab = corpus.build_vocab([["mov"], ["mov", "mov"], ["ret"]], K=2)
        assert vocab.ranked == [("mov", 3), ("ret", 1)]

    def test_non_increasing_counts_enforced(self):
        with pytest.raises(ConfigError):
            corpus.OpcodeVocab(ranked=[("a", 1), ("b", 5)])


class TestEncode:
    @pytest.fixture
    def vocab(self):
        return corpus.OpcodeVocab(ranked=[("mov", 9), ("push", 5), ("ret", 2)])

    def test_fixture(self, vocab):
        ids = corpus.encode(["push", "jmp", "mov"], vocab, L=5)
        assert ids.tolist() == [2, 4, 1, 0, 0]
        assert ids.dtype == np.int32

    def test_prefix_truncation(self, vocab):
        ids = corpus.encode(["mov", "push", "ret", "mov"], vocab, L=2)
        assert ids.tolist() == [1, 2]

    def test_exact_length_no_padding(self, vocab):
        ids = corpus.encode(["mov", "ret"], vocab, L=2)
        assert ids.tolist() == [1, 3]

    def test_id_range_invariant(self, vocab):
        rng = np.random.default_rng(0)
        words = ["mov", "push", "ret", "zzz", "movzx"]
        for _ in range(25):
            seq = [words[i] for i in rng.integers(0, len(words), size=12)]
            ids = corpus.encode(seq, vocab, L=8)
            assert ids.shape == (8,)
            assert ids.min() >= 0 and ids.max() < vocab.vocab_size


class TestVocabFile:
    def test_round_trip(self, tmp_path):
        vocab = corpus.build_vocab([["mov", "mov", "ret", "xor"]], K=3)
        path = tmp_path / "v.tsv"
        corpus.write_vocab_file(vocab, path)
        loaded = corpus.load_vocab_file(path)
        assert loaded.ranked == vocab.ranked

    def test_malformed_field_count(self, tmp_path):
        path = tmp_path / "v.tsv"
        path.write_text("1\tmov\n")
        with pytest.raises(ConfigError):
            corpus.load_vocab_file(path)

    def test_rank_out_of_order(self, tmp_path):
        path = tmp_path / "v.tsv"
        path.write_text("1\tmov\t5\n3\tret\t2\n")
        with pytest.raises(ConfigError):
            corpus.load_vocab_file(path)

    def test_non_integer_count(self, tmp_path):
        path = tmp_path / "v.tsv"
        path.write_text("1\tmov\tmany\n")
        with pytest.raises(ConfigError):
            corpus.load_vocab_file(path)

    def test_empty_file(self, tmp_path):
        path = tmp_path / "v.tsv"
        path.write_text("")
        with pytest.raises(ConfigError):
            corpus.load_vocab_file(path)


class TestDatasetFile:
    def make_dataset(self):
        vocab = corpus.OpcodeVocab(ranked=[("mov", 4), ("ret", 2)])
        parsed = [("a", "s0", ["mov", "ret"]), ("a", "s1", ["ret"]),
                  ("b", "s0", ["mov", "mov", "zzz"])]
        return corpus.encode_corpus(parsed, vocab, L=4)

    def test_round_trip_preserves_everything(self, tmp_path):
        ds = self.make_dataset()
        path = tmp_path / "d.txt"
        corpus.write_dataset_file(ds, path)
        loaded = corpus.load_dataset_file(path)
        assert loaded.L == ds.L and loaded.K == ds.K
        assert loaded.families == ds.families
        X0, y0 = ds.matrix()
        X1, y1 = loaded.matrix()
        np.testing.assert_array_equal(X0, X1)
        np.testing.assert_array_equal(y0, y1)

    def test_write_is_deterministic(self, tmp_path):
        ds = self.make_dataset()
        corpus.write_dataset_file(ds, tmp_path / "a.txt")
        corpus.write_dataset_file(ds, tmp_path / "b.txt")
        assert (tmp_path / "a.txt").read_bytes() == \
               (tmp_path / "b.txt").read_bytes()

    def test_wrong_magic(self, tmp_path):
        path = tmp_path / "d.txt"
        path.write_text("not-a-dataset\n")
        with pytest.raises(ConfigError, match="opseq-data"):
            corpus.load_dataset_file(path)

    def test_bad_label(self, tmp_path):
        path = tmp_path / "d.txt"
        path.write_text("opseq-data v1\nL=2\nK=1\npad_side=post\n"
                        "truncate=prefix\nfamilies=a\n5,1,1\n")
        with pytest.raises(ConfigError, match="label"):
            corpus.load_dataset_file(path)

    def test_bad_record_length(self, tmp_path):
        path = tmp_path / "d.txt"
        path.write_text("opseq-data v1\nL=3\nK=1\npad_side=post\n"
                        "truncate=prefix\nfamilies=a\n0,1,1\n")
        with pytest.raises(ConfigError, match="length"):
            corpus.load_dataset_file(path)

    def test_id_out_of_range(self, tmp_path):
        path = tmp_path / "d.txt"
        path.write_text("opseq-data v1\nL=2\nK=1\npad_side=post\n"
                        "truncate=prefix\nfamilies=a\n0,1,9\n")
        with pytest.raises(ConfigError):
            corpus.load_dataset_file(path)


class TestGoldenFiles:
    """The checked-in corpus must reproduce the checked-in outputs exactly."""

    def test_vocab_bytes(self, tmp_path):
        parsed, skipped = corpus.load_corpus_dir(FIXTURES / "golden_corpus")
        assert skipped == []
        vocab = corpus.build_vocab((ops for _, _, ops in parsed), K=4)
        out = tmp_path / "vocab.tsv"
        corpus.write_vocab_file(vocab, out)
        assert out.read_bytes() == (FIXTURES / "golden_vocab.tsv").read_bytes()

    def test_dataset_bytes(self, tmp_path):
        parsed, _ = corpus.load_corpus_dir(FIXTURES / "golden_corpus")
        vocab = corpus.load_vocab_file(FIXTURES / "golden_vocab.tsv")
        ds = corpus.encode_corpus(parsed, vocab, L=6)
        out = tmp_path / "dataset.txt"
        corpus.write_dataset_file(ds, out)
        assert out.read_bytes() == \
            (FIXTURES / "golden_dataset.txt").read_bytes()

    def test_golden_dataset_loads(self):
        ds = corpus.load_dataset_file(FIXTURES / "golden_dataset.txt")
        assert ds.families == ["famA", "famB"]
        assert len(ds.records) == 4
        assert ds.records[0].ids.tolist() == [1, 3, 1, 5, 0, 0]


class TestCorpusDir:
    def test_sorted_order_and_jobs_equivalence(self, tmp_path):
        for fam, name, body in [("b", "y.txt", "mov\n"), ("a", "x.txt", "ret\n"),
                                ("a", "w.txt", "push\n"), ("b", "z.txt", "xor\n")]:
            d = tmp_path / fam
            d.mkdir(exist_ok=True)
            (d / name).write_text(body)
        serial, _ = corpus.load_corpus_dir(tmp_path, jobs=1)
        parallel, _ = corpus.load_corpus_dir(tmp_path, jobs=2)
        assert serial == parallel
        assert [(f, n) for f, n, _ in serial] == \
            [("a", "w.txt"), ("a", "x.txt"), ("b", "y.txt"), ("b", "z.txt")]

    def test_empty_samples_reported_not_fatal(self, tmp_path):
        d = tmp_path / "fam"
        d.mkdir()
        (d / "ok.txt").write_text("mov\n")
        (d / "empty.txt").write_text("; nothing\n")
        parsed, skipped = corpus.load_corpus_dir(tmp_path)
        assert len(parsed) == 1
        assert skipped == [("fam", "empty.txt")]

    def test_missing_directory(self, tmp_path):
        with pytest.raises(ConfigError):
            corpus.load_corpus_dir(tmp_path / "nope")


class TestGroupFamilies:
    def test_reference_counts_grouping(self):
        grouping = corpus.group_families(FAMILY_COUNTS)
        assert grouping.groups[0] == \
            ["Winwebsec", "Zbot", "Vundo", "Hotbar", "Obfuscator"]
        assert grouping.groups[1] == \
            ["Alureon", "Renos", "Onlinegames", "BHO", "Zeroacess"]
        assert grouping.groups[2] == \
            ["DelfInject", "Starpage", "Fakerean", "Adload", "Cycbot"]
        # Agent and Rbot tie at 817; lexicographic order puts Agent first
        assert grouping.groups[3] == \
            ["Vobfus", "Lolyda", "CeeInject", "Agent", "Rbot"]

    def test_group_boundaries_monotone(self):
        grouping = corpus.group_families(FAMILY_COUNTS)
        for g, h in zip(grouping.groups, grouping.groups[1:]):
            assert min(FAMILY_COUNTS[f] for f in g) >= \
                max(FAMILY_COUNTS[f] for f in h)

    def test_cumulative_sets(self):
        grouping = corpus.group_families(FAMILY_COUNTS)
        sets = grouping.cumulative_sets()
        assert [len(s) for s in sets] == [5, 10, 15, 20]
        assert sets[0] == grouping.groups[0]
        assert sets[3] == sum(grouping.groups, [])
        assert sets[1][:5] == sets[0]

    @pytest.mark.parametrize("n", [0, 3, 7, 12])
    def test_non_multiple_of_five_rejected(self, n):
        counts = {f"f{i}": 10 + i for i in range(n)}
        with pytest.raises(ConfigError, match="multiple of 5"):
            corpus.group_families(counts)


class TestSplit:
    def small_dataset(self, per_family=(10, 20)):
        records = []
        for fam_idx, n in enumerate(per_family):
            for i in range(n):
                records.append(corpus.SampleRecord(
                    f"fam{fam_idx}", np.full(4, fam_idx, dtype=np.int32)))
        return corpus.EncodedDataset(L=4, K=3, families=[
            f"fam{i}" for i in range(len(per_family))], records=records)

    def test_half_up_rounding_per_family(self):
        parts = corpus.split(self.small_dataset((10, 20)), test_frac=0.15,
                             seed=0)
        counts = parts.test.family_counts()
        # 10*0.15 = 1.5 rounds to 2; 20*0.15 = 3.0 stays 3
        assert counts == {"fam0": 2, "fam1": 3}
        assert parts.train.family_counts() == {"fam0": 8, "fam1": 17}

    def test_nothing_lost_or_duplicated(self):
        ds = self.small_dataset((9, 13))
        parts = corpus.split(ds, seed=3)
        assert len(parts.train.records) + len(parts.test.records) == 22
        train_ids = {id(r) for r in parts.train.records}
        test_ids = {id(r) for r in parts.test.records}
        assert not train_ids & test_ids

    def test_deterministic_under_seed(self):
        ds = self.small_dataset((12, 12))
        a = corpus.split(ds, seed=5)
        b = corpus.split(ds, seed=5)
        c = corpus.split(ds, seed=6)
        key = lambda p: [id(r) for r in p.test.records]
        assert key(a) == key(b)
        assert key(a) != key(c)

    def test_single_sample_family_rejected(self):
        ds = self.small_dataset((1, 10))
        with pytest.raises(InsufficientDataError, match="fam0"):
            corpus.split(ds)

    def test_bad_fraction(self):
        with pytest.raises(ConfigError):
            corpus.split(self.small_dataset(), test_frac=0.0)
        with pytest.raises(ConfigError):
            corpus.split(self.small_dataset(), test_frac=1.0)

    def test_accepts_plain_record_list(self):
        ds = self.small_dataset((6, 6))
        parts = corpus.split(list(ds.records), test_frac=0.5, seed=1)
        assert len(parts.test.records) == 6


class TestSubsetTruncate:
    def test_subset_relabels_in_given_order(self):
        ds = TestSplit().small_dataset((4, 4))
        sub = ds.subset(["fam1"])
        assert sub.families == ["fam1"]
        _, y = sub.matrix()
        assert set(y.tolist()) == {0}

    def test_truncate_prefix(self):
        ds = TestSplit().small_dataset((3,))
        short = ds.truncate(2)
        assert short.L == 2
        assert all(r.ids.shape == (2,) for r in short.records)

    def test_truncate_cannot_extend(self):
        with pytest.raises(ConfigError):
            TestSplit().small_dataset((3,)).truncate(9)


class TestSynthEasy:
    def test_deterministic(self):
        a = corpus.synth_corpus(3, 5, 40, seed=11)
        b = corpus.synth_corpus(3, 5, 40, seed=11)
        assert a[0] == b[0]

    def test_different_seed_differs(self):
        a, _ = corpus.synth_corpus(2, 3, 40, seed=1)
        b, _ = corpus.synth_corpus(2, 3, 40, seed=2)
        assert a != b

    def test_counts_and_lengths(self):
        records, _ = corpus.synth_corpus(4, 6, 100, seed=0)
        assert len(records) == 24
        for family, ops in records:
            assert 80 <= len(ops) <= 120

    def test_family_transition_matrices_well_separated(self):
        _, truth = corpus.synth_corpus(5, 2, 50, seed=7)
        names = truth["families"]
        for i in range(5):
            ti = truth["transitions"][names[i]]
            np.testing.assert_allclose(ti.sum(axis=1), 1.0, rtol=1e-12)
            for j in range(i + 1, 5):
                tv = corpus.transition_tv_distance(
                    ti, truth["transitions"][names[j]])
                assert tv >= 0.2, (i, j, tv)

    def test_rare_tail_means_omitted_symbols_barely_matter(self):
        _, truth = corpus.synth_corpus(2, 2, 50, vocab_size=40, seed=3)
        trans = truth["transitions"][truth["families"][0]]
        # symbols beyond the core 30 each get well under 0.5% of any row
        assert trans[:, 30:].max() < 0.005

    def test_symbols_come_from_vocab(self):
        records, truth = corpus.synth_corpus(2, 3, 30, vocab_size=10, seed=5)
        allowed = set(truth["symbols"])
        assert len(allowed) == 10
        for _, ops in records:
            assert set(ops) <= allowed

    def test_validation(self):
        with pytest.raises(ConfigError):
            corpus.synth_corpus(1, 5, 40)
        with pytest.raises(ConfigError):
            corpus.synth_corpus(2, 5, 40, separation="medium")
        with pytest.raises(ConfigError):
            corpus.synth_corpus(2, 5, 5)
        with pytest.raises(ConfigError):
            corpus.synth_corpus(2, 5, 40, vocab_size=2)


class TestSynthHard:
    def test_deterministic(self):
        a = corpus.synth_corpus(3, 4, 60, separation="hard", seed=9)
        b = corpus.synth_corpus(3, 4, 60, separation="hard", seed=9)
        assert a[0] == b[0]

    def test_background_chain_shared_across_families(self):
        _, truth = corpus.synth_corpus(4, 2, 60, separation="hard", seed=2)
        names = truth["families"]
        base = truth["transitions"][names[0]]
        for name in names[1:]:
            np.testing.assert_array_equal(truth["transitions"][name], base)

    def test_markers_embedded_near_both_ends(self):
        records, truth = corpus.synth_corpus(3, 6, 80, separation="hard",
                                             seed=4)
        symbols = truth["symbols"]
        for family, ops in records:
            start_marker, end_marker = truth["markers"][family]
            start_str = [symbols[s] for s in start_marker]
            end_str = [symbols[s] for s in end_marker]
            assert any(ops[off:off + 5] == start_str for off in range(4))
            n = len(ops)
            assert any(ops[n - 5 - off:n - off] == end_str
                       for off in range(4))

    def test_family_motif_rates_differ(self):
        _, truth = corpus.synth_corpus(3, 2, 60, separation="hard", seed=6)
        names = truth["families"]
        w0 = truth["motif_weights"][names[0]]
        w1 = truth["motif_weights"][names[1]]
        np.testing.assert_allclose(w0.sum(), 1.0, rtol=1e-12)
        assert not np.allclose(w0, w1)


class TestParseFuzz:
    def test_junk_bytes_never_break_the_pipeline(self):
        # Arbitrary byte soup either raises the empty-sample error or
        # yields mnemonics that encode into the valid id range.
        rng = np.random.default_rng(123)
        vocab = corpus.OpcodeVocab(ranked=[("mov", 3), ("ret", 1)])
        for trial in range(50):
            blob = bytes(rng.integers(0, 256, size=rng.integers(1, 400)))
            text = blob.decode("utf-8", errors="replace")
            try:
                ops = corpus.parse_disassembly(text, name=f"fuzz{trial}")
            except EmptySampleError:
                continue
            assert ops, "parse returned an empty list instead of raising"
            ids = corpus.encode(ops, vocab, L=16)
            assert ids.shape == (16,)
            assert ids.min() >= 0 and ids.max() < vocab.vocab_size

    def test_mixed_text_lines(self):
        rng = np.random.default_rng(321)
        pieces = ["mov eax, ebx", "??", "401000:", "=====",
                  "push 0x40", "\x00\x01", "ret"]
        for _ in range(20):
            order = rng.permutation(len(pieces))
            text = "\n".join(pieces[i] for i in order)
            ops = corpus.parse_disassembly(text)
            assert set(ops) <= {"mov", "push", "ret"}
            assert len(ops) == 3
