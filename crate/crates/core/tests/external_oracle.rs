use std::io::{BufRead, BufReader, Write};
use std::net::{TcpListener, TcpStream};
use std::thread;
use std::time::{Duration, Instant};

use slalom_core::oracle::protocol::{self, Request, Response};
use slalom_core::oracle::{Endpoint, ExternalOptions, ExternalOracle};
use slalom_core::{Error, Oracle, SlalomOracle, SlalomParams, TokenSeq, Vocabulary};

fn reference() -> SlalomOracle {
    SlalomOracle(
        SlalomParams::new(
            vec![0.5, -1.0, 2.0, 0.0, 1.5],
            vec![1.0, -2.0, 0.25, 3.0, -0.5],
            0.0,
        )
        .unwrap(),
    )
}

fn opts(ms: u64) -> ExternalOptions {
    ExternalOptions {
        timeout: Duration::from_millis(ms),
        vocab: None,
    }
}

/// Serves `oracle` on a fresh local port for a single connection.
fn spawn_server(vocab: Option<Vocabulary>) -> (String, thread::JoinHandle<protocol::ServeStats>) {
    let listener = TcpListener::bind("127.0.0.1:0").unwrap();
    let addr = listener.local_addr().unwrap().to_string();
    let handle = thread::spawn(move || {
        let (stream, _) = listener.accept().unwrap();
        let reader = BufReader::new(stream.try_clone().unwrap());
        protocol::serve(&reference(), vocab.as_ref(), reader, stream).unwrap()
    });
    (addr, handle)
}

/// Accepts one connection, answers the handshake and hands the rest to `f`.
fn spawn_stub<F>(f: F) -> String
where
    F: FnOnce(BufReader<TcpStream>, TcpStream) + Send + 'static,
{
    let listener = TcpListener::bind("127.0.0.1:0").unwrap();
    let addr = listener.local_addr().unwrap().to_string();
    thread::spawn(move || {
        let (mut stream, _) = listener.accept().unwrap();
        let mut reader = BufReader::new(stream.try_clone().unwrap());
        let mut line = String::new();
        reader.read_line(&mut line).unwrap();
        assert_eq!(
            serde_json::from_str::<Request>(&line).unwrap(),
            Request::Hello { version: 1 }
        );
        let hello = Response::Hello {
            version: 1,
            classes: 2,
        };
        stream
            .write_all(protocol::encode(&hello).unwrap().as_bytes())
            .unwrap();
        f(reader, stream);
    });
    addr
}

fn seqs() -> Vec<TokenSeq> {
    vec![
        TokenSeq::new(vec![0]),
        TokenSeq::new(vec![1, 2, 2]),
        TokenSeq::new(vec![4, 3, 2, 1, 0]),
        TokenSeq::new(vec![3, 3, 1]),
    ]
}

#[test]
fn tcp_scores_match_in_process() {
    let (addr, server) = spawn_server(None);
    let ext = ExternalOracle::connect(&Endpoint::Tcp(addr), opts(5000)).unwrap();
    assert_eq!(ext.classes(), 2);
    let local = reference();
    for s in seqs() {
        assert_eq!(ext.score(&s).unwrap(), local.score(&s).unwrap());
    }
    let batch = ext.score_batch(&seqs()).unwrap();
    assert_eq!(batch, local.score_batch(&seqs()).unwrap());
    drop(ext);
    let stats = server.join().unwrap();
    assert_eq!(stats.scored, 8);
    assert_eq!(stats.errors, 0);
}

#[test]
fn token_strings_go_through_the_vocabulary() {
    let vocab = Vocabulary::new(["a", "b", "c", "d", "e"]).unwrap();
    let (addr, server) = spawn_server(Some(vocab.clone()));
    let ext = ExternalOracle::connect(
        &Endpoint::Tcp(addr),
        ExternalOptions {
            timeout: Duration::from_secs(5),
            vocab: Some(vocab),
        },
    )
    .unwrap();
    let s = [4, 0, 2];
    assert_eq!(ext.score(&s).unwrap(), reference().score(&s).unwrap());
    assert!(matches!(ext.score(&[7]), Err(Error::OutOfVocab { .. })));
    drop(ext);
    server.join().unwrap();
}

#[test]
fn server_error_frames_become_protocol_errors() {
    let (addr, server) = spawn_server(None);
    let ext = ExternalOracle::connect(&Endpoint::Tcp(addr), opts(5000)).unwrap();
    // token 9 is outside the served model
    assert!(matches!(ext.score(&[9]), Err(Error::Protocol(_))));
    assert!(ext.score(&[1]).is_ok());
    drop(ext);
    let stats = server.join().unwrap();
    assert_eq!((stats.scored, stats.errors), (1, 1));
}

#[test]
fn pipelined_replies_may_arrive_out_of_order() {
    let n = seqs().len();
    let addr = spawn_stub(move |mut reader, mut stream| {
        let local = reference();
        let mut got = Vec::new();
        for _ in 0..n {
            let mut line = String::new();
            reader.read_line(&mut line).unwrap();
            match serde_json::from_str::<Request>(&line).unwrap() {
                Request::Score { id, ids, .. } => got.push((id, ids.unwrap())),
                other => panic!("unexpected {other:?}"),
            }
        }
        // every request arrived before any reply was sent
        for (id, ids) in got.into_iter().rev() {
            let frame = Response::Score {
                id,
                log_odds: Some(local.score(&ids).unwrap()),
                logits: None,
            };
            stream
                .write_all(protocol::encode(&frame).unwrap().as_bytes())
                .unwrap();
        }
        let mut rest = String::new();
        let _ = reader.read_line(&mut rest);
    });
    let ext = ExternalOracle::connect(&Endpoint::Tcp(addr), opts(5000)).unwrap();
    let out = ext.score_batch(&seqs()).unwrap();
    assert_eq!(out, reference().score_batch(&seqs()).unwrap());
}

#[test]
fn logits_replies_reduce_to_log_odds() {
    let addr = spawn_stub(|mut reader, mut stream| {
        for line in (&mut reader).lines() {
            let Ok(Request::Score { id, .. }) = serde_json::from_str(&line.unwrap()) else {
                break;
            };
            let frame = Response::Score {
                id,
                log_odds: None,
                logits: Some(vec![0.25, 2.0]),
            };
            stream
                .write_all(protocol::encode(&frame).unwrap().as_bytes())
                .unwrap();
        }
    });
    let ext = ExternalOracle::connect(&Endpoint::Tcp(addr), opts(5000)).unwrap();
    assert_eq!(ext.score(&[0]).unwrap(), 1.75);
    assert_eq!(ext.score_logits(&[0]).unwrap(), vec![0.25, 2.0]);
}

#[test]
fn silent_server_times_out() {
    let addr = spawn_stub(|mut reader, _stream| {
        let mut sink = String::new();
        while reader.read_line(&mut sink).map(|n| n > 0).unwrap_or(false) {}
    });
    let ext = ExternalOracle::connect(&Endpoint::Tcp(addr), opts(200)).unwrap();
    let t0 = Instant::now();
    assert!(matches!(ext.score(&[0]), Err(Error::Timeout(200))));
    assert!(t0.elapsed() < Duration::from_secs(3));
}

#[test]
fn closed_stream_is_unavailable() {
    let addr = spawn_stub(|mut reader, stream| {
        let mut line = String::new();
        reader.read_line(&mut line).unwrap();
        drop(stream);
    });
    let ext = ExternalOracle::connect(&Endpoint::Tcp(addr), opts(5000)).unwrap();
    assert!(matches!(ext.score(&[0]), Err(Error::OracleUnavailable(_))));
    assert!(matches!(ext.score(&[1]), Err(Error::OracleUnavailable(_))));
}

#[test]
fn unreachable_endpoints_are_unavailable() {
    let port = {
        let l = TcpListener::bind("127.0.0.1:0").unwrap();
        l.local_addr().unwrap().port()
    };
    let r = ExternalOracle::connect(&Endpoint::Tcp(format!("127.0.0.1:{port}")), opts(500));
    assert!(matches!(r, Err(Error::OracleUnavailable(_))));
    let r = ExternalOracle::connect(&Endpoint::Exec("true".into()), opts(2000));
    assert!(matches!(r, Err(Error::OracleUnavailable(_))));
}

#[test]
fn version_mismatch_fails_the_handshake() {
    let listener = TcpListener::bind("127.0.0.1:0").unwrap();
    let addr = listener.local_addr().unwrap().to_string();
    thread::spawn(move || {
        let (mut stream, _) = listener.accept().unwrap();
        let mut reader = BufReader::new(stream.try_clone().unwrap());
        let mut line = String::new();
        reader.read_line(&mut line).unwrap();
        let hello = Response::Hello {
            version: 2,
            classes: 2,
        };
        stream
            .write_all(protocol::encode(&hello).unwrap().as_bytes())
            .unwrap();
        let _ = reader.read_line(&mut line);
    });
    let r = ExternalOracle::connect(&Endpoint::Tcp(addr), opts(2000));
    assert!(matches!(r, Err(Error::Protocol(_))));
}

#[test]
fn concurrent_callers_share_one_connection() {
    let (addr, server) = spawn_server(None);
    let ext = ExternalOracle::connect(&Endpoint::Tcp(addr), opts(5000)).unwrap();
    let local = reference();
    thread::scope(|scope| {
        for k in 0..4usize {
            let (ext, local) = (&ext, &local);
            scope.spawn(move || {
                for i in 0..50usize {
                    let s = [(i + k) % 5, (i * 3 + k) % 5, k % 5];
                    assert_eq!(ext.score(&s).unwrap(), local.score(&s).unwrap());
                }
            });
        }
    });
    drop(ext);
    assert_eq!(server.join().unwrap().scored, 200);
}
