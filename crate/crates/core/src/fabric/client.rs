use std::time::Duration;

use reqwest::blocking::{Client, RequestBuilder, Response};
use reqwest::StatusCode;
use serde::de::DeserializeOwned;

use super::http::{DeleteRequest, DeleteResponse, DequeueRequest, ErrorBody, ExistsResponse, PollResponse};
use super::{EnqueueAck, Fabric, FabricError, MonitorSnapshot};
use crate::model::{BlobRef, ResultRecord, TaskId, TaskSpec, TelemetryRecord, ToolVersionId};
use crate::queue::{DeleteReport, Dequeue, Receipt, SnapshotRow};
use crate::store::{sha256_hex, TelemetryStats, VersionPackage};

/// [`Fabric`] client for a remote fabric's HTTP API.
#[derive(Clone, Debug)]
pub struct HttpFabric {
    base: String,
    client: Client,
}

impl HttpFabric {
    pub fn new(base_url: &str) -> Result<Self, FabricError> {
        let client = Client::builder()
            .timeout(Duration::from_secs(120))
            .connect_timeout(Duration::from_secs(5))
            .build()
            .map_err(|e| FabricError::Unreachable(e.to_string()))?;
        Ok(Self {
            base: base_url.trim_end_matches('/').to_owned(),
            client,
        })
    }

    pub fn base_url(&self) -> &str {
        &self.base
    }

    fn url(&self, path: &str) -> String {
        format!("{}{}", self.base, path)
    }

    fn send(&self, req: RequestBuilder) -> Result<Response, FabricError> {
        let resp = req
            .send()
            .map_err(|e| FabricError::Unreachable(e.to_string()))?;
        if resp.status().is_success() {
            return Ok(resp);
        }
        let status = resp.status();
        let text = resp.text().unwrap_or_default();
        Err(match serde_json::from_str::<ErrorBody>(&text) {
            Ok(body) => FabricError::from_kind(&body.error, body.message),
            Err(_) if status == StatusCode::NOT_FOUND => FabricError::NotFound(text),
            Err(_) => FabricError::Service(format!("{status}: {text}")),
        })
    }

    fn json<T: DeserializeOwned>(&self, req: RequestBuilder) -> Result<T, FabricError> {
        self.send(req)?
            .json()
            .map_err(|e| FabricError::Service(format!("bad response body: {e}")))
    }

    fn bytes(&self, req: RequestBuilder) -> Result<Vec<u8>, FabricError> {
        self.send(req)?
            .bytes()
            .map(|b| b.to_vec())
            .map_err(|e| FabricError::Unreachable(e.to_string()))
    }

    /// Request counters kept by the server.
    pub fn metrics(&self) -> Result<std::collections::BTreeMap<String, u64>, FabricError> {
        self.json(self.client.get(self.url("/metrics")))
    }

    pub fn close_topic(&self, topic: &str) -> Result<(), FabricError> {
        self.send(self.client.delete(self.url(&format!("/topics/{topic}"))))?;
        Ok(())
    }
}

impl Fabric for HttpFabric {
    fn enqueue(&self, task: &TaskSpec) -> Result<EnqueueAck, FabricError> {
        self.json(self.client.post(self.url("/queue/enqueue")).json(task))
    }

    fn dequeue(&self, worker: &str) -> Result<Dequeue, FabricError> {
        let body = DequeueRequest {
            worker: worker.to_owned(),
        };
        self.json(self.client.post(self.url("/queue/dequeue")).json(&body))
    }

    fn delete(&self, id: TaskId, receipt: &Receipt) -> Result<DeleteReport, FabricError> {
        let body = DeleteRequest {
            id,
            receipt: receipt.clone(),
        };
        let resp: DeleteResponse = self.json(self.client.post(self.url("/queue/delete")).json(&body))?;
        Ok(resp.report)
    }

    fn exists(&self, id: TaskId) -> Result<bool, FabricError> {
        let resp: ExistsResponse = self.json(self.client.get(self.url(&format!("/queue/exists/{id}"))))?;
        Ok(resp.exists)
    }

    fn snapshot(&self) -> Result<Vec<SnapshotRow>, FabricError> {
        self.json(self.client.get(self.url("/queue/snapshot")))
    }

    fn put_blob(&self, container: &str, name: &str, bytes: &[u8]) -> Result<BlobRef, FabricError> {
        self.json(
            self.client
                .put(self.url(&format!("/blobs/{container}/{name}")))
                .body(bytes.to_vec()),
        )
    }

    fn get_blob(&self, blob: &BlobRef) -> Result<Vec<u8>, FabricError> {
        let bytes = self.bytes(
            self.client
                .get(self.url(&format!(
                    "/blobs/{}/{}?hash={}",
                    blob.container, blob.name, blob.content_hash
                ))),
        )?;
        // The transfer itself is checked too.
        let actual = sha256_hex(&bytes);
        if actual != blob.content_hash {
            return Err(FabricError::HashMismatch(format!(
                "blob {}/{}: expected {}, received {actual}",
                blob.container, blob.name, blob.content_hash
            )));
        }
        Ok(bytes)
    }

    fn publish(&self, topic: &str, record: &ResultRecord) -> Result<(), FabricError> {
        self.send(
            self.client
                .post(self.url(&format!("/topics/{topic}/publish")))
                .json(record),
        )?;
        Ok(())
    }

    fn poll(&self, topic: &str, cursor: u64) -> Result<(Vec<ResultRecord>, u64), FabricError> {
        let resp: PollResponse = self.json(
            self.client
                .get(self.url(&format!("/topics/{topic}?cursor={cursor}"))),
        )?;
        Ok((resp.records, resp.next_cursor))
    }

    fn record_telemetry(&self, record: &TelemetryRecord) -> Result<(), FabricError> {
        self.send(self.client.post(self.url("/telemetry")).json(record))?;
        Ok(())
    }

    fn telemetry_stats(&self) -> Result<TelemetryStats, FabricError> {
        self.json(self.client.get(self.url("/telemetry/stats")))
    }

    fn upload_version(&self, id: &ToolVersionId, archive: &[u8]) -> Result<VersionPackage, FabricError> {
        self.json(
            self.client
                .put(self.url(&format!("/versions/{id}")))
                .body(archive.to_vec()),
        )
    }

    fn download_version(&self, id: &ToolVersionId) -> Result<Option<Vec<u8>>, FabricError> {
        match self.bytes(self.client.get(self.url(&format!("/versions/{id}")))) {
            Ok(bytes) => Ok(Some(bytes)),
            Err(FabricError::NotFound(_)) => Ok(None),
            Err(e) => Err(e),
        }
    }

    fn list_versions(&self) -> Result<Vec<VersionPackage>, FabricError> {
        self.json(self.client.get(self.url("/versions")))
    }

    fn monitor(&self) -> Result<MonitorSnapshot, FabricError> {
        self.json(self.client.get(self.url("/monitor")))
    }
}
