//! Checkpoint files restore the exact server state.

mod common;

use common::fixture;
use fedvc::federation::{read_checkpoint, run_round, write_checkpoint, Strategy};

#[test]
fn checkpoint_round_trip_is_bit_exact() {
    let cfg = fixture::config(Strategy::FedvcEm);
    let (mut server, mut clients) = fixture::setup(&cfg, 12);
    run_round(&mut server, &mut clients, &cfg).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let path = write_checkpoint(dir.path(), &server, &clients, true).unwrap();
    assert!(path.ends_with("round_1.ckpt"));

    let ckpt = read_checkpoint(&std::fs::read(&path).unwrap()).unwrap();
    assert_eq!(ckpt.params, server.params);
    assert_eq!(ckpt.concepts.as_ref(), Some(server.bank.concepts()));
    assert_eq!(ckpt.upsilon.len(), clients.len());
    for ((id, u), c) in ckpt.upsilon.iter().zip(&clients) {
        assert_eq!(*id, c.id);
        assert_eq!(u.as_slice(), c.preference.upsilon());
    }
}

#[test]
fn baseline_checkpoints_carry_only_the_model() {
    let cfg = fixture::config(Strategy::Fedavg);
    let (server, clients) = fixture::setup(&cfg, 13);
    let dir = tempfile::tempdir().unwrap();
    let path = write_checkpoint(dir.path(), &server, &clients, false).unwrap();
    let ckpt = read_checkpoint(&std::fs::read(path).unwrap()).unwrap();
    assert_eq!(ckpt.params, server.params);
    assert!(ckpt.concepts.is_none());
    assert!(ckpt.upsilon.is_empty());
}

#[test]
fn truncated_checkpoint_is_an_error() {
    let cfg = fixture::config(Strategy::FedvcEm);
    let (server, clients) = fixture::setup(&cfg, 14);
    let dir = tempfile::tempdir().unwrap();
    let path = write_checkpoint(dir.path(), &server, &clients, true).unwrap();
    let bytes = std::fs::read(path).unwrap();
    assert!(read_checkpoint(&bytes[..bytes.len() - 3]).is_err());
}
