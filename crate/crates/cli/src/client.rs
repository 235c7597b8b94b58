//! Blocking HTTP client speaking the service's JSON API.

use microstudy_core::phase1::SubmissionAck;
use microstudy_core::phase2::{Enrollment, EnrollmentRequest, TrialReportRequest};
use microstudy_core::store::ErrorKind;
use microstudy_core::{
    ApiError, CampaignConfig, CrossoverReport, Phase1Submission, Phase1Task, RankedHypothesis, StudyApi,
    TrialCampaign, WorkerId,
};
use reqwest::blocking::{Client, RequestBuilder, Response};
use serde::de::DeserializeOwned;

use crate::server::{CreateCampaign, Created};

/// One campaign on a remote service.
#[derive(Debug, Clone)]
pub struct HttpCampaign {
    http: Client,
    base: String,
    campaign: String,
}

fn transport(e: reqwest::Error) -> ApiError {
    ApiError::new(ErrorKind::Transport, e.to_string())
}

fn check(resp: Response) -> Result<Response, ApiError> {
    if resp.status().is_success() {
        return Ok(resp);
    }
    let status = resp.status();
    let body = resp.text().map_err(transport)?;
    Err(serde_json::from_str::<ApiError>(&body)
        .unwrap_or_else(|_| ApiError::new(ErrorKind::Transport, format!("HTTP {status}: {body}"))))
}

impl HttpCampaign {
    pub fn new(base: impl Into<String>, campaign: impl Into<String>) -> Self {
        Self {
            http: Client::new(),
            base: base.into().trim_end_matches('/').to_string(),
            campaign: campaign.into(),
        }
    }

    /// Creates a campaign on the service and returns a client bound to it.
    pub fn create(base: impl Into<String>, id: Option<String>, config: CampaignConfig) -> Result<Self, ApiError> {
        let mut client = Self::new(base, String::new());
        let created: Created = client.json(
            client
                .http
                .post(format!("{}/campaigns", client.base))
                .json(&CreateCampaign { id, config }),
        )?;
        client.campaign = created.id;
        Ok(client)
    }

    pub fn campaign_id(&self) -> &str {
        &self.campaign
    }

    fn url(&self, path: &str) -> String {
        format!("{}/campaigns/{}/{}", self.base, self.campaign, path)
    }

    fn json<T: DeserializeOwned>(&self, req: RequestBuilder) -> Result<T, ApiError> {
        check(req.send().map_err(transport)?)?.json().map_err(transport)
    }

    fn empty(&self, req: RequestBuilder) -> Result<(), ApiError> {
        check(req.send().map_err(transport)?).map(|_| ())
    }

    fn text(&self, req: RequestBuilder) -> Result<String, ApiError> {
        check(req.send().map_err(transport)?)?.text().map_err(transport)
    }

    /// The campaign's event log as JSON lines.
    pub fn events(&self) -> Result<String, ApiError> {
        self.text(self.http.get(self.url("events")))
    }
}

impl StudyApi for HttpCampaign {
    fn next_task(&self, worker: &WorkerId) -> Result<Phase1Task, ApiError> {
        self.json(
            self.http
                .get(self.url("phase1/next-task"))
                .query(&[("worker", worker.as_str())]),
        )
    }

    fn submit(&self, submission: &Phase1Submission) -> Result<SubmissionAck, ApiError> {
        self.json(self.http.post(self.url("phase1/submissions")).json(submission))
    }

    fn report(&self, k: usize) -> Result<Vec<RankedHypothesis>, ApiError> {
        self.json(self.http.get(self.url("report")).query(&[("k", k)]))
    }

    fn configure_trial(&self, trial: &TrialCampaign) -> Result<(), ApiError> {
        self.empty(self.http.post(self.url("phase2/trial")).json(trial))
    }

    fn enroll(&self, request: &EnrollmentRequest) -> Result<Enrollment, ApiError> {
        self.json(self.http.post(self.url("phase2/enrollments")).json(request))
    }

    fn record_report(&self, request: &TrialReportRequest) -> Result<(), ApiError> {
        self.empty(self.http.post(self.url("phase2/reports")).json(request))
    }

    fn analyze(&self) -> Result<CrossoverReport, ApiError> {
        self.json(self.http.get(self.url("phase2/analysis")))
    }

    fn export_csv(&self) -> Result<String, ApiError> {
        self.text(self.http.get(self.url("export.csv")))
    }

    fn close(&self) -> Result<(), ApiError> {
        self.empty(self.http.post(self.url("close")))
    }
}
