use std::sync::Arc;

use verifarm::fabric::http::{serve, ServeOptions};
use verifarm::fabric::{Fabric, FabricConfig, FabricError, FabricService, HttpFabric};
use verifarm::model::{
    BlobRef, ClientId, Outcome, OutcomeKind, ResourceLimits, ResultRecord, TaskId, TaskSpec,
    TelemetryRecord,
};
use verifarm::queue::{DeleteReport, Dequeue};
use verifarm::store::{build_zip, sha256_hex, ENTRY_POINT};

fn start() -> (tempfile::TempDir, Arc<FabricService>, verifarm::fabric::http::ServerHandle, HttpFabric) {
    let dir = tempfile::tempdir().unwrap();
    let config = FabricConfig {
        root: dir.path().to_owned(),
        ..FabricConfig::default()
    };
    let service = Arc::new(FabricService::open(&config).unwrap());
    let handle = serve(service.clone(), "127.0.0.1:0", ServeOptions::default()).unwrap();
    let client = HttpFabric::new(&handle.url()).unwrap();
    (dir, service, handle, client)
}

fn task(client: ClientId, payload: Vec<BlobRef>) -> TaskSpec {
    TaskSpec {
        id: TaskId::new(),
        client,
        module_name: "drivers/foo.ko".into(),
        rule_name: "0032".into(),
        version: "v1".into(),
        command: "{tool_dir}/run-analysis".into(),
        payload,
        limits: ResourceLimits {
            timeout: 30,
            spaceout: 512,
        },
        submitted_at: 1,
    }
}

#[test]
fn queue_round_trip_over_http() {
    let (_dir, service, handle, fabric) = start();
    let client = ClientId::new();
    let blob = fabric.put_blob("payloads", "a.zip", b"payload").unwrap();
    assert_eq!(blob.content_hash, sha256_hex(b"payload"));
    assert_eq!(fabric.get_blob(&blob).unwrap(), b"payload");

    let spec = task(client, vec![blob]);
    let ack = fabric.enqueue(&spec).unwrap();
    assert_eq!(ack.id, spec.id);
    assert!(matches!(fabric.enqueue(&spec), Err(FabricError::Duplicate(_))));
    assert!(fabric.exists(spec.id).unwrap());
    assert_eq!(fabric.snapshot().unwrap().len(), 1);

    let (entry, receipt) = match fabric.dequeue("w-1").unwrap() {
        Dequeue::Dequeued { entry, receipt } => (entry, receipt),
        other => panic!("unexpected {other:?}"),
    };
    assert_eq!(entry.task, spec);
    assert_eq!(entry.dequeue_count, 1);
    assert!(matches!(fabric.dequeue("w-2").unwrap(), Dequeue::Empty));
    assert_eq!(fabric.monitor().unwrap().active_workers, 2);

    let record = ResultRecord {
        task: spec.id,
        client,
        outcome: Outcome::new(OutcomeKind::Pass),
        worker: "w-1".into(),
        queue_wait: 0.1,
        processing_time: 0.2,
        dequeue_count: 1,
        completed_at: 5,
    };
    fabric.publish(&client.to_string(), &record).unwrap();
    assert_eq!(fabric.delete(spec.id, &receipt).unwrap(), DeleteReport::Deleted);
    assert_eq!(fabric.delete(spec.id, &receipt).unwrap(), DeleteReport::AlreadyGone);
    assert!(!fabric.exists(spec.id).unwrap());

    let (records, cursor) = fabric.poll(&client.to_string(), 0).unwrap();
    assert_eq!((records, cursor), (vec![record], 1));
    assert_eq!(fabric.poll(&client.to_string(), 1).unwrap(), (vec![], 1));

    fabric
        .record_telemetry(&TelemetryRecord {
            task: spec.id,
            queue_wait: 0.1,
            processing_time: 0.2,
            dequeue_count: 1,
            visibility_transitions: 2,
            worker: "w-1".into(),
        })
        .unwrap();
    assert_eq!(fabric.telemetry_stats().unwrap().count, 1);
    assert!(fabric.metrics().unwrap()["dequeue"] >= 2);
    assert_eq!(service.queue_len(), 0);
    handle.stop();
}

#[test]
fn errors_map_to_kinds() {
    let (_dir, _service, _handle, fabric) = start();
    let missing = BlobRef {
        container: "payloads".into(),
        name: "nope".into(),
        content_hash: sha256_hex(b""),
    };
    assert!(matches!(fabric.get_blob(&missing), Err(FabricError::NotFound(_))));

    let stored = fabric.put_blob("payloads", "x", b"one").unwrap();
    let stale = BlobRef {
        content_hash: sha256_hex(b"two"),
        ..stored
    };
    assert!(matches!(fabric.get_blob(&stale), Err(FabricError::HashMismatch(_))));

    let mut bad = task(ClientId::new(), vec![]);
    bad.limits.timeout = 0;
    assert!(matches!(fabric.enqueue(&bad), Err(FabricError::Invalid(_))));

    assert!(matches!(
        fabric.upload_version(&"broken".into(), b"not a zip"),
        Err(FabricError::MalformedArchive(_))
    ));
}

#[test]
fn versions_over_http() {
    let (_dir, service, _handle, fabric) = start();
    let zip = build_zip([(ENTRY_POINT, &b"#!/bin/sh\nexit 0\n"[..], true)]);
    let pkg = fabric.upload_version(&"tool-1".into(), &zip).unwrap();
    assert_eq!(pkg.archive.content_hash, sha256_hex(&zip));
    assert_eq!(fabric.download_version(&"tool-1".into()).unwrap(), Some(zip));
    assert_eq!(fabric.download_version(&"tool-2".into()).unwrap(), None);
    assert_eq!(fabric.list_versions().unwrap().len(), 1);
    assert_eq!(service.request_count("download_version"), 2);
}

#[test]
fn unreachable_fabric() {
    let fabric = HttpFabric::new("http://127.0.0.1:1").unwrap();
    assert!(matches!(fabric.exists(TaskId::new()), Err(FabricError::Unreachable(_))));
}
