import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from cochise.knowledge import MALFORMED_PREFIX, KnowledgeStore, parse_knowledge_markers, render_worldview
from cochise.log import SteppingClock, deterministic_run_ids, open_run, read_run


def test_marker_parsing():
    text = """Some prose.
FINDING: SMB signing disabled on 192.168.56.22
ACCOUNT: north\\jon.snow:Winter2024 [password]
ACCOUNT: NORTH\\\\Arya:aad3b435b51404eeaad3b435b51404ee [ntlm_hash]
ACCOUNT: local-admin:hunter2
ACCOUNT: this is not a marker
```
FINDING: inside a code block
```
"""
    findings, accounts = parse_knowledge_markers(text)
    assert findings == ["SMB signing disabled on 192.168.56.22", MALFORMED_PREFIX + "this is not a marker"]
    assert [(a.domain, a.username, a.secret, a.kind) for a in accounts] == [
        ("north", "jon.snow", "Winter2024", "password"),
        ("north", "Arya", "aad3b435b51404eeaad3b435b51404ee", "ntlm_hash"),
        ("", "local-admin", "hunter2", "password"),
    ]


def test_unknown_kind_maps_to_other():
    _, (acct,) = parse_knowledge_markers("ACCOUNT: d\\u:s [kerberoast]")
    assert acct.kind == "other"


def test_identity_is_case_insensitive_and_counts_once():
    store = KnowledgeStore()
    assert store.add_account("NORTH", "Jon.Snow", "a") is True
    assert store.add_account("north", "jon.snow", "b") is False
    assert store.add_account("north", "jon.snow", "b") is False
    assert store.distinct_account_count == 1
    assert store.accounts[0].secrets == [("a", "password"), ("b", "password")]


def test_empty_username_rejected():
    with pytest.raises(ValueError):
        KnowledgeStore().add_account("d", " ", "x")


def test_findings_deduplicate_on_normalized_text():
    store = KnowledgeStore()
    assert store.add_finding("port  445 open")
    assert not store.add_finding("port 445   open ")
    assert len(store.findings) == 1


def test_events_mirror_mutations(tmp_path):
    log = open_run(tmp_path, {}, SteppingClock(), run_ids=deterministic_run_ids("k"))
    store = KnowledgeStore(log)
    store.apply_markers("FINDING: a\nACCOUNT: d\\u:p1 [password]\nACCOUNT: d\\u:p1 [password]", "executor", "1")
    store.add_account("D", "U", "h", "ntlm_hash", source="planner")
    log.close()
    events = read_run(log.path).events[1:]
    assert [e.event for e in events] == ["knowledge.finding", "knowledge.account", "knowledge.account"]
    assert events[1].payload["new_identity"] is True
    assert events[2].payload["new_identity"] is False
    assert events[1].payload["identity"] == "d\\u"
    assert events[0].payload["task_id"] == "1"


def test_render_empty_store():
    assert render_worldview(KnowledgeStore()) == "## Compromised Accounts\n(none)\n\n## Findings\n(none)\n"


def test_render_includes_accounts_and_findings_in_order():
    store = KnowledgeStore()
    store.add_finding("first")
    store.add_account("north", "jon.snow", "Winter", host="winterfell")
    store.add_account("north", "jon.snow", "abcd", "ntlm_hash")
    store.add_finding("second")
    text = store.render_worldview()
    assert text == (
        "## Compromised Accounts\n"
        "- north\\jon.snow (password: Winter; ntlm_hash: abcd) host: winterfell\n"
        "\n## Findings\n- first\n- second\n"
    )


def test_render_elides_oldest_findings_within_budget():
    store = KnowledgeStore()
    for i in range(200):
        store.add_finding(f"finding number {i:03d} " + "x" * 20)
    text = store.render_worldview(1024)
    assert len(text) <= 1024
    assert "older finding(s) elided" in text
    assert "finding number 199" in text
    assert "finding number 000" not in text


def test_budget_below_minimum_rejected():
    with pytest.raises(ValueError):
        KnowledgeStore().render_worldview(100)


_ops = st.lists(
    st.one_of(
        st.tuples(st.just("f"), st.text(alphabet="abc xyz", min_size=1, max_size=30)),
        st.tuples(st.just("a"), st.sampled_from(["d", "D", "e"]), st.sampled_from(["u", "U", "v"]),
                  st.sampled_from(["p", "q"]), st.sampled_from(["password", "ntlm_hash"])),
    ),
    max_size=80,
)


def _apply(store, ops):
    for op in ops:
        if op[0] == "f":
            store.add_finding(op[1])
        else:
            store.add_account(op[1], op[2], op[3], op[4])


@settings(max_examples=200, deadline=None)
@given(ops=_ops, budget=st.integers(1024, 3000))
def test_render_is_pure_and_bounded(ops, budget):
    a, b = KnowledgeStore(), KnowledgeStore()
    _apply(a, ops)
    _apply(b, ops)
    text = a.render_worldview(budget)
    assert text == b.render_worldview(budget) == a.render_worldview(budget)
    if a.distinct_account_count <= 5:
        assert len(text) <= budget


@settings(max_examples=100, deadline=None)
@given(ops=_ops)
def test_from_events_rebuilds_store(tmp_path_factory, ops):
    log = open_run(tmp_path_factory.mktemp("kv"), {}, SteppingClock(), run_ids=deterministic_run_ids("k"))
    store = KnowledgeStore(log)
    _apply(store, ops)
    log.close()
    rebuilt = KnowledgeStore.from_events(read_run(log.path).events)
    assert rebuilt.render_worldview(100000) == store.render_worldview(100000)
    assert rebuilt.distinct_account_count == store.distinct_account_count
