"""Environment templates, the warm pool, channels, and simulated processes."""
from __future__ import annotations

import threading
import time

import pytest

from trapline.checkpointd import ProcessState
from trapline.sandbox import (
    CODE_BASE, STACK_BASE, STACK_SIZE, Channel, EnvironmentTemplate,
    NetIdentityAllocator, PoolEmpty, SandboxError, SandboxManager,
    ScriptedDriver, SimProcess, StubExternalDriver, load_template_dir,
)
from trapline.script import TraceStepEvent
from trapline.tracer import hash_image

from conftest import TEMPLATE_DIR

SMALL_TREE = {
    "bin/sh": b"#!trusted shell\n",
    "bin/ls": b"#!trusted ls\n",
    "etc/passwd": b"root:x:0:0\n",
}


def small_template(template_id="t-small") -> EnvironmentTemplate:
    return EnvironmentTemplate(template_id, dict(SMALL_TREE),
                               frozenset({"bin/sh", "bin/ls"}))


def make_manager(**kwargs) -> SandboxManager:
    mgr = SandboxManager(ScriptedDriver(), **kwargs)
    mgr.register_template(small_template())
    return mgr


# -- templates -----------------------------------------------------------------


def test_template_normalizes_paths_and_validates_images():
    tmpl = small_template()
    assert set(tmpl.baseline_tree) == {"/bin/sh", "/bin/ls", "/etc/passwd"}
    assert tmpl.baseline_images == {"/bin/sh", "/bin/ls"}
    assert tmpl.image_bytes() == [SMALL_TREE["bin/ls"], SMALL_TREE["bin/sh"]]
    with pytest.raises(SandboxError, match="not in tree"):
        EnvironmentTemplate("bad", {"a": b"x"}, frozenset({"missing"}))


def test_load_template_dir_stock_template():
    tmpl = load_template_dir(TEMPLATE_DIR)
    assert tmpl.template_id == "linux-basic"
    assert "/home/user/report.doc" in tmpl.baseline_tree
    assert tmpl.baseline_images >= {"/bin/sh", "/bin/ls", "/bin/cat"}
    for image_path in tmpl.baseline_images:
        assert image_path in tmpl.baseline_tree


def test_load_template_dir_errors(tmp_path):
    with pytest.raises(SandboxError, match="manifest"):
        load_template_dir(tmp_path)
    (tmp_path / "manifest.txt").write_text("image bin/x\n")
    with pytest.raises(SandboxError, match="missing 'id'"):
        load_template_dir(tmp_path)
    (tmp_path / "manifest.txt").write_text("id t\nflavor spicy\n")
    with pytest.raises(SandboxError, match="unknown key"):
        load_template_dir(tmp_path)


def test_register_template_builds_whitelist_and_rejects_duplicates():
    mgr = make_manager()
    wl = mgr.whitelist("t-small")
    assert hash_image(SMALL_TREE["bin/sh"]) in wl
    assert hash_image(b"alien") not in wl
    with pytest.raises(SandboxError, match="already registered"):
        mgr.register_template(small_template())
    with pytest.raises(SandboxError, match="unknown template"):
        mgr.whitelist("t-nope")


# -- provisioning and purity -------------------------------------------------------


def test_provisioned_environments_start_pristine_and_isolated():
    mgr = make_manager()
    a = mgr.provision("t-small")
    b = mgr.provision("t-small")
    assert a.env_id != b.env_id
    assert a.net_identity != b.net_identity
    assert a.tree == b.tree == small_template().baseline_tree
    # mutating one environment never leaks into the other or the template
    a.tree["/tmp/dropped"] = b"payload"
    assert "/tmp/dropped" not in b.tree
    assert "/tmp/dropped" not in small_template().baseline_tree
    c = mgr.provision("t-small")
    assert "/tmp/dropped" not in c.tree


def test_identity_allocator_uniqueness_and_reuse():
    alloc = NetIdentityAllocator("10.77")
    seen = {alloc.allocate() for _ in range(600)}
    assert len(seen) == 600
    for identity in seen:
        assert identity.startswith("10.77.")
        octets = identity.split(".")
        assert 2 <= int(octets[3]) <= 251
    alloc2 = NetIdentityAllocator("10.77")
    first = alloc2.allocate()
    alloc2.release(first)
    assert alloc2.live_count() == 0
    # the identity becomes available again once released
    assert first in {alloc2.allocate() for _ in range(65536 - 1)} | {first}


def test_live_identities_never_collide_under_churn():
    mgr = make_manager(pool_target=0)
    envs = [mgr.provision("t-small") for _ in range(40)]
    identities = [e.net_identity for e in envs]
    assert len(set(identities)) == 40
    for env in envs[:20]:
        mgr.destroy(env)
    more = [mgr.provision("t-small") for _ in range(10)]
    live = [e.net_identity for e in envs[20:] + more]
    assert len(set(live)) == len(live)


def test_max_live_cap():
    mgr = make_manager(pool_target=0, max_live=3)
    for _ in range(3):
        mgr.provision("t-small")
    with pytest.raises(SandboxError, match="cap"):
        mgr.provision("t-small")


# -- pool ---------------------------------------------------------------------------


def test_acquire_takes_from_warm_pool_and_fails_when_empty():
    mgr = make_manager(pool_target=2)
    assert mgr.warm("t-small") == 2
    assert mgr.pool_size("t-small") == 2
    env = mgr.acquire("t-small")
    assert env.state == "assigned"
    mgr.acquire("t-small")
    # the background replenisher may or may not have caught up; drain hard
    deadline = time.monotonic() + 5.0
    drained = 0
    while time.monotonic() < deadline:
        try:
            mgr.acquire("t-small")
            drained += 1
        except PoolEmpty:
            break
    else:
        pytest.fail("pool never emptied")
    mgr.shutdown()
    with pytest.raises(SandboxError):
        mgr.acquire("t-unknown")


def test_acquire_wait_covers_replenish_window():
    mgr = make_manager(pool_target=1)
    mgr.warm("t-small")
    first = mgr.acquire_wait("t-small", timeout=2.0)
    # immediately acquire again: the pool may be momentarily empty, but a
    # replenish build is in flight and must arrive within the bound
    second = mgr.acquire_wait("t-small", timeout=5.0)
    assert first.env_id != second.env_id
    mgr.shutdown()


def test_acquire_wait_times_out_when_nothing_can_arrive():
    mgr = SandboxManager(ScriptedDriver(), pool_target=0)
    mgr.register_template(small_template())
    started = time.monotonic()
    with pytest.raises(PoolEmpty, match="within"):
        mgr.acquire_wait("t-small", timeout=0.3)
    assert time.monotonic() - started < 2.0
    mgr.shutdown()


def test_pool_replenishes_after_acquire():
    mgr = make_manager(pool_target=2)
    mgr.warm("t-small")
    mgr.acquire("t-small")
    deadline = time.monotonic() + 5.0
    while mgr.pool_size("t-small") < 2 and time.monotonic() < deadline:
        time.sleep(0.01)
    assert mgr.pool_size("t-small") == 2
    mgr.shutdown()


def test_destroy_is_idempotent_and_total():
    mgr = make_manager(pool_target=0)
    env = mgr.provision("t-small")
    chan = mgr.driver.open_channel(env, "ssh")
    proc = mgr.driver.spawn_process(env, "/bin/sh", SMALL_TREE["bin/sh"])
    before = mgr.live_count()
    mgr.destroy(env)
    assert env.state == "destroyed"
    assert mgr.live_count() == before - 1
    assert not proc.alive
    assert chan.closed
    assert env.tree == {}
    mgr.destroy(env)  # second call: no error, no double release
    assert mgr.live_count() == before - 1
    mgr.shutdown()


def test_shutdown_destroys_everything_and_blocks_new_builds():
    mgr = make_manager(pool_target=2)
    mgr.warm("t-small")
    held = mgr.acquire("t-small")
    mgr.shutdown()
    assert held.state == "destroyed"
    assert mgr.live_count() == 0
    with pytest.raises(SandboxError, match="shut down"):
        mgr.provision("t-small")


# -- channels ------------------------------------------------------------------------


def test_channel_banner_sent_once():
    chan = Channel("env-1", "ssh", banner=b"SSH-2.0-Trap\r\n")
    assert chan.open_banner() == b"SSH-2.0-Trap\r\n"
    assert chan.open_banner() == b""
    assert chan.outbound_bytes == len(b"SSH-2.0-Trap\r\n")


def test_channel_reply_modes_and_accounting():
    chan = Channel("env-1", "telnet", echo=True)
    assert chan.deliver(b"hello") == b"hello"  # echo mode
    chan.queue_reply(b"queued wins")
    assert chan.deliver(b"x") == b"queued wins"  # queued beats echo
    silent = Channel("env-1", "ssh")
    assert silent.deliver(b"anyone there?") == b""
    assert silent.inbound_bytes == len(b"anyone there?")
    assert silent.outbound_bytes == 0
    silent.note_reply(b"push")
    assert silent.outbound_bytes == 4
    silent.close()
    with pytest.raises(SandboxError, match="closed"):
        silent.deliver(b"late")


# -- simulated processes ----------------------------------------------------------------


def test_simprocess_initial_layout():
    proc = SimProcess(1000, "env-1", "/tmp/svc", b"\x7fELF-image")
    state = proc.state()
    assert state.registers["rip"] == CODE_BASE
    bases = {r.base: r for r in state.regions}
    assert bases[CODE_BASE].perms == "r-x"
    assert bases[CODE_BASE].content == b"\x7fELF-image"
    assert bases[STACK_BASE].perms == "rw-"
    assert bases[STACK_BASE].size == STACK_SIZE
    assert [d.number for d in state.descriptors] == [0, 1, 2]


def test_simprocess_memory_semantics():
    proc = SimProcess(1001, "env-1", "/x", b"codecodecode")
    proc.apply_mem_write(STACK_BASE + 0x100, b".doc\x00")
    assert proc.read_memory(STACK_BASE + 0x100, 5) == b".doc\x00"
    # a write outside every region maps a fresh one
    proc.apply_mem_write(0x7F0000000000, b"heap!")
    assert proc.read_memory(0x7F0000000000, 5) == b"heap!"
    # straddling an existing region boundary is rejected
    with pytest.raises(SandboxError, match="straddles"):
        proc.apply_mem_write(STACK_BASE + STACK_SIZE - 2, b"xxxx")
    with pytest.raises(SandboxError, match="no region maps"):
        proc.read_memory(0x1234, 4)
    proc.note_instruction(CODE_BASE + 8)
    assert proc.state().registers["rip"] == CODE_BASE + 8
    proc.kill()
    with pytest.raises(SandboxError, match="not running"):
        proc.apply_mem_write(STACK_BASE, b"z")


def test_simprocess_descriptors_grow():
    proc = SimProcess(1002, "env-1", "/x", b"i")
    desc = proc.add_descriptor("socket", "198.51.100.77:21")
    assert desc.number == 3
    assert proc.add_descriptor("file", "/tmp/loot").number == 4


# -- the scripted driver -----------------------------------------------------------------


def test_driver_file_ops_report_mutation_kinds():
    driver = ScriptedDriver()
    env = driver.build(small_template(), "env-d1", "10.77.0.2")
    assert driver.write_file(env, "tmp/new", b"1") == "create"
    assert driver.write_file(env, "tmp/new", b"2") == "modify"
    assert driver.read_file(env, "/tmp/new") == b"2"
    assert driver.delete_file(env, "tmp/new") is True
    assert driver.delete_file(env, "tmp/new") is False
    assert driver.read_file(env, "tmp/new") is None


def test_driver_process_state_bridge():
    driver = ScriptedDriver()
    env = driver.build(small_template(), "env-d2", "10.77.0.3")
    proc = driver.spawn_process(env, "/tmp/svc", b"image")
    assert driver.process_state(proc.pid) == proc.state()
    assert driver.process_state(424242) is None
    proc.kill()
    assert driver.process_state(proc.pid) is None


def test_trace_stream_lands_writes_before_yielding():
    driver = ScriptedDriver()
    env = driver.build(small_template(), "env-d3", "10.77.0.4")
    proc = driver.spawn_process(env, "/tmp/svc", b"image")
    events = [
        TraceStepEvent("instruction", CODE_BASE, text="entry"),
        TraceStepEvent("mem_write", STACK_BASE + 4, data=b"SECRET"),
        TraceStepEvent("mem_read", STACK_BASE + 4, size=6),
    ]
    seen = []
    for kind, address, detail in driver.trace_stream(proc, events):
        if kind == "mem_write":
            # the effect precedes the event: memory already holds the bytes
            assert proc.read_memory(address, 6) == b"SECRET"
        seen.append((kind, address, detail))
    assert seen == [
        ("instruction", CODE_BASE, "entry"),
        ("mem_write", STACK_BASE + 4, "write 6 bytes @ 0x7ffe0004"),
        ("mem_read", STACK_BASE + 4, "read 6 bytes @ 0x7ffe0004"),
    ]
    assert proc.state().registers["rip"] == CODE_BASE


def test_driver_determinism():
    """Two environments from the same template that run the same mutations
    end with identical trees."""
    driver = ScriptedDriver()
    results = []
    for _ in range(2):
        env = driver.build(small_template(), f"env-{_}", "10.77.0.9")
        driver.write_file(env, "tmp/a", b"one")
        driver.write_file(env, "etc/passwd", b"patched")
        driver.delete_file(env, "bin/ls")
        results.append(dict(env.tree))
    assert results[0] == results[1]


def test_stub_external_driver_names_the_seam():
    stub = StubExternalDriver()
    with pytest.raises(SandboxError, match="ScriptedDriver"):
        stub.build(small_template(), "e", "10.77.0.2")


# -- concurrency ----------------------------------------------------------------------


def test_concurrent_acquire_wait_yields_distinct_environments():
    mgr = make_manager(pool_target=4)
    mgr.warm("t-small")
    got: list = []
    errors: list = []

    def grab():
        try:
            got.append(mgr.acquire_wait("t-small", timeout=10.0))
        except Exception as exc:
            errors.append(exc)

    threads = [threading.Thread(target=grab) for _ in range(8)]
    for t in threads:
        t.start()
    for t in threads:
        t.join()
    assert errors == []
    assert len({env.env_id for env in got}) == 8
    assert len({env.net_identity for env in got}) == 8
    mgr.shutdown()
