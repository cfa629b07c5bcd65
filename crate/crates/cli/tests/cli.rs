use std::fs;
use std::net::UdpSocket;
use std::path::Path;
use std::process::{Command, Output, Stdio};
use std::thread::sleep;
use std::time::{Duration, Instant};

use streamseg::io::write_raw;
use streamseg::output::GROUND_COLOR;
use streamseg::packet::PACKET_SIZE;
use streamseg::synth::{bundled_scene, raycast_scan, scene_to_packets};
use tempfile::TempDir;

fn streamseg(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_streamseg"))
        .args(args)
        .current_dir(dir)
        .env_remove("STREAMSEG_LOG")
        .output()
        .expect("binary runs")
}

fn code(out: &Output) -> i32 {
    out.status.code().expect("exited normally")
}

fn stdout(out: &Output) -> String {
    String::from_utf8_lossy(&out.stdout).into_owned()
}

fn stderr(out: &Output) -> String {
    String::from_utf8_lossy(&out.stderr).into_owned()
}

fn entries(dir: &Path) -> Vec<String> {
    let mut names: Vec<String> = fs::read_dir(dir).unwrap().map(|e| e.unwrap().file_name().to_string_lossy().into_owned()).collect();
    names.sort();
    names
}

fn sorted_lines(path: &Path) -> Vec<String> {
    let mut lines: Vec<String> = fs::read_to_string(path).unwrap().lines().map(str::to_owned).collect();
    lines.sort();
    lines
}

fn scene_payloads(name: &str) -> Vec<[u8; PACKET_SIZE]> {
    scene_to_packets(&raycast_scan(&bundled_scene(name).unwrap()).unwrap(), 0)
}

#[test]
fn flat_scene_ply_is_all_ground() {
    let tmp = TempDir::new().unwrap();
    let out = streamseg(tmp.path(), &["run", "--scene", "flat_ground", "--out", "out", "--format", "ply"]);
    assert_eq!(code(&out), 0, "{}", stderr(&out));
    let ply = fs::read_to_string(tmp.path().join("out/scan_000000.ply")).unwrap();
    let (header, body) = ply.split_once("end_header\n").unwrap();
    let vertices: usize = header.lines().find_map(|l| l.strip_prefix("element vertex ")).unwrap().parse().unwrap();
    assert!(vertices > 30_000);
    let ground = format!("{} {} {} -1", GROUND_COLOR[0], GROUND_COLOR[1], GROUND_COLOR[2]);
    let rows: Vec<&str> = body.lines().collect();
    assert_eq!(rows.len(), vertices);
    assert!(rows.iter().all(|r| r.ends_with(&ground)), "non-ground vertex in flat scene");
    assert_eq!(entries(tmp.path()), ["out"]);
}

#[test]
fn batch_and_stream_write_the_same_clusters() {
    let tmp = TempDir::new().unwrap();
    let synth = streamseg(tmp.path(), &["synth", "--out", "corpus", "--random", "1", "--seed", "42", "--scans", "2", "--capture", "pcap"]);
    assert_eq!(code(&synth), 0, "{}", stderr(&synth));
    for (input, flag) in [("--scene", "urban_block"), ("--pcap", "corpus/random_42.pcap")] {
        let s = streamseg(tmp.path(), &["run", input, flag, "--stream", "--out", "s", "--points"]);
        let b = streamseg(tmp.path(), &["run", input, flag, "--batch", "--out", "b", "--points"]);
        assert_eq!((code(&s), code(&b)), (0, 0), "{}{}", stderr(&s), stderr(&b));
        let stream = sorted_lines(&tmp.path().join("s/clusters.ndjson"));
        assert!(!stream.is_empty());
        assert_eq!(stream, sorted_lines(&tmp.path().join("b/clusters.ndjson")), "{input}");
        assert_eq!(stdout(&s), stdout(&b));
    }
    let two = streamseg(tmp.path(), &["run", "--pcap", "corpus/random_42.pcap"]);
    assert!(stdout(&two).starts_with("scans 2,"), "{}", stdout(&two));
}

#[test]
fn truncated_pcap_fails_cleanly() {
    let tmp = TempDir::new().unwrap();
    let synth = streamseg(tmp.path(), &["synth", "--out", "c", "--scene", "two_pedestrians"]);
    assert_eq!(code(&synth), 0);
    let bytes = fs::read(tmp.path().join("c/two_pedestrians.pcap")).unwrap();
    fs::write(tmp.path().join("cut.pcap"), &bytes[..bytes.len() - 700]).unwrap();
    let out = streamseg(tmp.path(), &["run", "--pcap", "cut.pcap"]);
    assert_eq!(code(&out), 2);
    assert!(stderr(&out).contains("error:"), "{}", stderr(&out));
    let missing = streamseg(tmp.path(), &["run", "--pcap", "missing.pcap"]);
    assert_eq!(code(&missing), 2);
}

#[test]
fn decode_failures_above_one_percent_fail() {
    let tmp = TempDir::new().unwrap();
    let mut payloads = scene_payloads("two_pedestrians");
    let corrupt = |p: &mut [u8; PACKET_SIZE]| p[2..4].copy_from_slice(&40_000u16.to_le_bytes());
    corrupt(&mut payloads[10]);
    write_raw(fs::File::create(tmp.path().join("one.raw")).unwrap(), payloads.iter().map(|p| &p[..])).unwrap();
    for k in [20, 30, 40, 50] {
        corrupt(&mut payloads[k]);
    }
    write_raw(fs::File::create(tmp.path().join("five.raw")).unwrap(), payloads.iter().map(|p| &p[..])).unwrap();

    let one = streamseg(tmp.path(), &["run", "--raw", "one.raw"]);
    assert_eq!(code(&one), 0, "{}", stderr(&one));
    assert!(stdout(&one).contains("decode errors 1,"));
    for mode in ["--stream", "--batch"] {
        let five = streamseg(tmp.path(), &["run", "--raw", "five.raw", mode]);
        assert_eq!(code(&five), 2, "{mode}");
        assert!(stderr(&five).contains("failed to decode"), "{}", stderr(&five));
    }
}

#[test]
fn eval_usage_errors() {
    let tmp = TempDir::new().unwrap();
    let osr = streamseg(tmp.path(), &["eval", "--min-osr", "1.1"]);
    assert_eq!(code(&osr), 1);
    let pcap = streamseg(tmp.path(), &["eval", "--pcap", "x.pcap"]);
    assert_eq!(code(&pcap), 1);
    assert!(stderr(&pcap).contains("ground truth"));
    fs::write(tmp.path().join("pcap.toml"), "[input]\npcap = \"x.pcap\"\n").unwrap();
    let config = streamseg(tmp.path(), &["eval", "--config", "pcap.toml"]);
    assert_eq!(code(&config), 1);
    let missing = streamseg(tmp.path(), &["eval", "--config", "missing.toml"]);
    assert_eq!(code(&missing), 2);
    assert_eq!(entries(tmp.path()), ["pcap.toml"]);
}

#[test]
fn empty_scene_corpus_reports_na() {
    let tmp = TempDir::new().unwrap();
    fs::create_dir(tmp.path().join("corpus")).unwrap();
    fs::write(tmp.path().join("corpus/empty.toml"), "name = \"empty\"\n").unwrap();
    let out = streamseg(tmp.path(), &["eval", "--corpus", "corpus", "--min-precision", "0.9", "--out", "ev"]);
    assert_eq!(code(&out), 0, "{}", stderr(&out));
    let aggregate = stdout(&out).lines().find(|l| l.starts_with("aggregate")).unwrap().to_owned();
    assert_eq!(aggregate.matches("n/a").count(), 6, "{aggregate}");
    assert!(fs::read_to_string(tmp.path().join("ev/eval.csv")).unwrap().contains("aggregate,0,0,0,0,0,0,n/a"));
}

#[test]
fn eval_gates() {
    let tmp = TempDir::new().unwrap();
    let pass = streamseg(tmp.path(), &["eval", "--min-precision", "0.9", "--min-osr", "0.9", "--max-fnr", "0.1"]);
    assert_eq!(code(&pass), 0, "{}{}", stdout(&pass), stderr(&pass));
    let fail = streamseg(
        tmp.path(),
        &["eval", "--scene", "urban_block", "--set", "t_ccl=0.05", "--set", "refinement=false", "--min-osr", "0.99"],
    );
    assert_eq!(code(&fail), 3);
    assert!(stderr(&fail).contains("min_osr"));
    let bad_param = streamseg(tmp.path(), &["eval", "--set", "t_merge=-1"]);
    assert_eq!(code(&bad_param), 1);
}

#[test]
fn bench_reports_stages() {
    let tmp = TempDir::new().unwrap();
    let zero = streamseg(tmp.path(), &["bench", "-n", "0"]);
    assert_eq!(code(&zero), 1);
    let udp = streamseg(tmp.path(), &["bench", "--udp", "127.0.0.1:0", "-n", "1"]);
    assert_eq!(code(&udp), 1);
    let out = streamseg(tmp.path(), &["bench", "--scene", "two_pedestrians", "-n", "3", "--out", "b"]);
    assert_eq!(code(&out), 0, "{}", stderr(&out));
    let text = stdout(&out);
    assert!(text.contains("scan total cpu") && text.contains("reference scan"), "{text}");
    let csv = fs::read_to_string(tmp.path().join("b/latency.csv")).unwrap();
    assert_eq!(csv.lines().count(), 1 + 3);
    assert_eq!(entries(&tmp.path().join("b")), ["latency.csv", "latency.json", "latency.txt"]);
}

#[test]
fn config_file_and_overrides() {
    let tmp = TempDir::new().unwrap();
    fs::create_dir(tmp.path().join("conf")).unwrap();
    fs::write(
        tmp.path().join("conf/run.toml"),
        "mode = \"batch\"\n[input]\nscene = \"two_pedestrians\"\n[output]\ndir = \"out\"\nformats = [\"csv\"]\n[params]\nt_merge = 0.7\n",
    )
    .unwrap();
    let printed = streamseg(tmp.path(), &["run", "-c", "conf/run.toml", "--set", "t_ccl=0.9", "--stream", "--print-config"]);
    assert_eq!(code(&printed), 0, "{}", stderr(&printed));
    let text = stdout(&printed);
    assert!(text.contains("mode = \"stream\"") && text.contains("t_merge = 0.7") && text.contains("t_ccl = 0.9"), "{text}");
    assert_eq!(entries(tmp.path()), ["conf"]);

    let run = streamseg(tmp.path(), &["run", "-c", "conf/run.toml"]);
    assert_eq!(code(&run), 0, "{}", stderr(&run));
    // the output dir is relative to the config file
    assert_eq!(entries(&tmp.path().join("conf/out")), ["scans.csv"]);

    fs::write(tmp.path().join("bad.toml"), "[params]\nno_such = 1\n").unwrap();
    assert_eq!(code(&streamseg(tmp.path(), &["run", "-c", "bad.toml"])), 1);
    assert_eq!(code(&streamseg(tmp.path(), &["run", "--scene", "a", "--pcap", "b"])), 1);
    assert_eq!(code(&streamseg(tmp.path(), &["run"])), 1);
    assert_eq!(code(&streamseg(tmp.path(), &["run", "--scene", "no_such_scene"])), 2);
}

#[test]
fn inspect_dumps_packets() {
    let tmp = TempDir::new().unwrap();
    let out = streamseg(tmp.path(), &["inspect", "--scene", "seam_box", "--json", "--limit", "10"]);
    assert_eq!(code(&out), 0, "{}", stderr(&out));
    let lines: Vec<serde_json::Value> = stdout(&out).lines().map(|l| serde_json::from_str(l).unwrap()).collect();
    assert_eq!(lines.len(), 10);
    assert_eq!(lines[1]["azimuth_first_cd"], 240);
    let text = streamseg(tmp.path(), &["inspect", "--scene", "seam_box", "--blocks"]);
    assert!(stdout(&text).ends_with("150 packets, 0 decode errors\n"));
    assert_eq!(stdout(&text).lines().filter(|l| l.starts_with("  block")).count(), 150 * 12);
}

#[test]
fn interrupt_flushes_live_scan() {
    let tmp = TempDir::new().unwrap();
    let port = UdpSocket::bind("127.0.0.1:0").unwrap().local_addr().unwrap().port();
    let addr = format!("127.0.0.1:{port}");
    let child = Command::new(env!("CARGO_BIN_EXE_streamseg"))
        .args(["run", "--udp", &addr, "--out", "live"])
        .current_dir(tmp.path())
        .stdout(Stdio::piped())
        .stderr(Stdio::piped())
        .spawn()
        .unwrap();
    let sender = UdpSocket::bind("127.0.0.1:0").unwrap();
    // wait until the receiver is bound
    let started = Instant::now();
    while !tmp.path().join("live").exists() && started.elapsed() < Duration::from_secs(10) {
        sleep(Duration::from_millis(20));
    }
    sleep(Duration::from_millis(200));
    for p in scene_payloads("two_pedestrians") {
        sender.send_to(&p[..1206], &addr).unwrap();
        sleep(Duration::from_micros(300));
    }
    sleep(Duration::from_millis(300));
    let killed = Command::new("kill").args(["-INT", &child.id().to_string()]).status().unwrap();
    assert!(killed.success());
    let out = child.wait_with_output().unwrap();
    assert_eq!(out.status.code(), Some(0), "{}", String::from_utf8_lossy(&out.stderr));
    let text = String::from_utf8_lossy(&out.stdout);
    assert!(text.starts_with("scans 1, clusters 2,"), "{text}");
    assert!(text.contains("packets 150,"), "{text}");
    assert_eq!(fs::read_to_string(tmp.path().join("live/clusters.ndjson")).unwrap().lines().count(), 2);
}
