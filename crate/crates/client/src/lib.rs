//! Blocking client for the restoration service.

use std::time::Duration;

use reqwest::blocking::{Client as Http, RequestBuilder};
use reqwest::Url;
use serde::de::DeserializeOwned;
use serde::Serialize;

use glyphmlm_core::api::{
    AcceptRequest, DateRequest, DateResponse, ErrorBody, FamilyView, RestoreRequest, RestoreResponse, SessionRequest,
    SessionView,
};

#[derive(Debug, thiserror::Error)]
pub enum ClientError {
    #[error("invalid server URL {0:?}")]
    BadUrl(String),
    #[error("transport: {0}")]
    Transport(#[from] reqwest::Error),
    /// The service answered with an error payload.
    #[error("server returned {status}: {message}")]
    Api { status: u16, message: String },
    #[error("unexpected response body: {0}")]
    Decode(String),
}

impl ClientError {
    pub fn status(&self) -> Option<u16> {
        match self {
            ClientError::Api { status, .. } => Some(*status),
            _ => None,
        }
    }
}

#[derive(Debug, Clone)]
pub struct Client {
    base: Url,
    http: Http,
}

impl Client {
    pub fn new(base: &str) -> Result<Self, ClientError> {
        let mut base = Url::parse(base).map_err(|_| ClientError::BadUrl(base.into()))?;
        if base.cannot_be_a_base() {
            return Err(ClientError::BadUrl(base.to_string()));
        }
        if !base.path().ends_with('/') {
            let p = format!("{}/", base.path());
            base.set_path(&p);
        }
        let http = Http::builder().timeout(Duration::from_secs(300)).build()?;
        Ok(Client { base, http })
    }

    fn url(&self, segments: &[&str]) -> Url {
        let mut url = self.base.clone();
        url.path_segments_mut()
            .expect("base URL checked")
            .pop_if_empty()
            .extend(segments);
        url
    }

    fn send<T: DeserializeOwned>(&self, req: RequestBuilder) -> Result<T, ClientError> {
        let resp = req.send()?;
        let status = resp.status();
        let bytes = resp.bytes()?;
        if !status.is_success() {
            let message = serde_json::from_slice::<ErrorBody>(&bytes)
                .map(|e| e.error)
                .unwrap_or_else(|_| String::from_utf8_lossy(&bytes).into_owned());
            return Err(ClientError::Api {
                status: status.as_u16(),
                message,
            });
        }
        serde_json::from_slice(&bytes).map_err(|e| ClientError::Decode(e.to_string()))
    }

    fn post<B: Serialize, T: DeserializeOwned>(&self, segments: &[&str], body: &B) -> Result<T, ClientError> {
        self.send(self.http.post(self.url(segments)).json(body))
    }

    pub fn restore(&self, req: &RestoreRequest) -> Result<RestoreResponse, ClientError> {
        self.post(&["restore"], req)
    }

    pub fn create_session(&self, req: &SessionRequest) -> Result<SessionView, ClientError> {
        self.post(&["sessions"], req)
    }

    pub fn session(&self, id: &str) -> Result<SessionView, ClientError> {
        self.send(self.http.get(self.url(&["sessions", id])))
    }

    pub fn accept(&self, id: &str, req: &AcceptRequest) -> Result<SessionView, ClientError> {
        self.post(&["sessions", id, "accept"], req)
    }

    pub fn undo(&self, id: &str) -> Result<SessionView, ClientError> {
        self.send(self.http.post(self.url(&["sessions", id, "undo"])))
    }

    pub fn family(&self, token: &str) -> Result<FamilyView, ClientError> {
        self.send(self.http.get(self.url(&["families", token])))
    }

    pub fn date(&self, req: &DateRequest) -> Result<DateResponse, ClientError> {
        self.post(&["date"], req)
    }

    pub fn info(&self) -> Result<serde_json::Value, ClientError> {
        self.send(self.http.get(self.url(&["info"])))
    }
}
