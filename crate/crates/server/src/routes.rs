use std::convert::Infallible;
use std::sync::Arc;
use std::time::Duration;

use axum::extract::{FromRequest, Path, Query, Request, State};
use axum::http::{header, HeaderMap, StatusCode};
use axum::middleware::{self, Next};
use axum::response::sse::{Event as SseEvent, KeepAlive, Sse};
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use futures::{Stream, StreamExt};
use serde::de::DeserializeOwned;
use serde::Deserialize;

use adaptrial_core::{Error, Event, ExperimentConfig, OperatorAction, Reward};

use crate::app::App;
use crate::error::ApiError;
use crate::views::{
    ActionView, AllocationView, AssignmentView, CreatedView, RewardView, StateView, StatsView, SummaryView,
};

/// JSON body whose rejections use the service's error body.
pub struct ApiJson<T>(pub T);

impl<S: Send + Sync, T: DeserializeOwned> FromRequest<S> for ApiJson<T> {
    type Rejection = ApiError;

    async fn from_request(req: Request, state: &S) -> Result<Self, ApiError> {
        let Json(v) = Json::<T>::from_request(req, state).await?;
        Ok(ApiJson(v))
    }
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AssignBody {
    pub participant_id: String,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RewardBody {
    pub assignment_id: u64,
    pub value: serde_json::Number,
}

fn parse_reward(n: &serde_json::Number) -> Result<Reward, ApiError> {
    match n.as_f64() {
        Some(v) if v == 0.0 => Ok(Reward::Failure),
        Some(v) if v == 1.0 => Ok(Reward::Success),
        _ => Err(ApiError::invalid(format!("reward value must be 0 or 1, got {n}"))),
    }
}

#[derive(Debug, Deserialize)]
pub struct EventsQuery {
    /// Resume after this sequence; the first event delivered is `from + 1`.
    pub from: Option<u64>,
}

type ApiResult<T> = Result<T, ApiError>;

pub fn router(app: Arc<App>) -> Router {
    let v1 = Router::new()
        .route("/experiments", post(create).get(list))
        .route("/experiments/{id}/assignments", post(assign))
        .route("/experiments/{id}/rewards", post(reward))
        .route("/experiments/{id}/actions", post(action))
        .route("/experiments/{id}/state", get(state))
        .route("/experiments/{id}/stats", get(stats))
        .route("/experiments/{id}/allocation", get(allocation))
        .route("/experiments/{id}/events", get(events))
        .route_layer(middleware::from_fn_with_state(app.clone(), auth));
    Router::new()
        .route("/healthz", get(|| async { "ok" }))
        .nest("/v1", v1)
        .fallback(|| async { ApiError::not_found("no such route") })
        .with_state(app)
}

/// Accepts `Authorization: Bearer <token>`, or `?access_token=` for
/// EventSource clients that cannot set headers.
async fn auth(State(app): State<Arc<App>>, req: Request, next: Next) -> Response {
    let Some(expected) = app.token.as_deref() else {
        return next.run(req).await;
    };
    let header_ok = req
        .headers()
        .get(header::AUTHORIZATION)
        .and_then(|v| v.to_str().ok())
        .and_then(|v| v.strip_prefix("Bearer "))
        .is_some_and(|t| t == expected);
    let query_ok = req.uri().query().is_some_and(|q| {
        q.split('&')
            .filter_map(|kv| kv.split_once('='))
            .any(|(k, v)| k == "access_token" && v == expected)
    });
    if header_ok || query_ok {
        next.run(req).await
    } else {
        ApiError::unauthorized().into_response()
    }
}

async fn create(
    State(app): State<Arc<App>>,
    ApiJson(config): ApiJson<ExperimentConfig>,
) -> ApiResult<(StatusCode, Json<CreatedView>)> {
    let experiment_id = app.create(config)?;
    tracing::info!(experiment = %experiment_id, "created");
    Ok((StatusCode::CREATED, Json(CreatedView { experiment_id })))
}

async fn list(State(app): State<Arc<App>>) -> Json<Vec<SummaryView>> {
    let mut out = Vec::new();
    for exp in app.experiments() {
        out.push(SummaryView::of(&exp.live.read().await.state));
    }
    Json(out)
}

async fn assign(
    State(app): State<Arc<App>>,
    Path(id): Path<String>,
    ApiJson(body): ApiJson<AssignBody>,
) -> ApiResult<Json<AssignmentView>> {
    let exp = app.experiment(&id)?;
    let view = app
        .mutate(&exp, |live| {
            let a = live.state.assign(&body.participant_id, &mut live.rng)?;
            Ok((AssignmentView::of(&live.state, &a.record), a.events))
        })
        .await?;
    Ok(Json(view))
}

async fn reward(
    State(app): State<Arc<App>>,
    Path(id): Path<String>,
    ApiJson(body): ApiJson<RewardBody>,
) -> ApiResult<Json<RewardView>> {
    let value = parse_reward(&body.value)?;
    let exp = app.experiment(&id)?;
    let view = app
        .mutate(&exp, |live| {
            let events = live.state.record_reward(body.assignment_id, value)?;
            let arm = live
                .state
                .assignment(body.assignment_id)
                .map(|r| r.arm)
                .ok_or_else(|| Error::NotFound(format!("assignment {}", body.assignment_id)))?;
            let view = RewardView {
                assignment_id: body.assignment_id,
                arm,
                reward: value,
                flushed: events.iter().any(|e| matches!(e.event, Event::BatchFlushed { .. })),
                sequence: live.state.last_sequence,
            };
            Ok((view, events))
        })
        .await?;
    Ok(Json(view))
}

async fn action(
    State(app): State<Arc<App>>,
    Path(id): Path<String>,
    ApiJson(action): ApiJson<OperatorAction>,
) -> ApiResult<Json<ActionView>> {
    let exp = app.experiment(&id)?;
    let view = app
        .mutate(&exp, |live| {
            let ev = live.state.apply_operator_action(action)?;
            let view = ActionView {
                sequence: live.state.last_sequence,
                status: live.state.status(),
            };
            Ok((view, vec![ev]))
        })
        .await?;
    tracing::info!(experiment = %id, ?action, "operator action");
    if matches!(action, OperatorAction::End) {
        app.snapshot(&exp).await?;
    }
    Ok(Json(view))
}

async fn state(State(app): State<Arc<App>>, Path(id): Path<String>) -> ApiResult<Json<StateView>> {
    let exp = app.experiment(&id)?;
    let live = exp.live.read().await;
    Ok(Json(StateView::of(&live.state)))
}

async fn stats(State(app): State<Arc<App>>, Path(id): Path<String>) -> ApiResult<Json<StatsView>> {
    let exp = app.experiment(&id)?;
    let live = exp.live.read().await;
    Ok(Json(StatsView::of(&live.state)))
}

async fn allocation(State(app): State<Arc<App>>, Path(id): Path<String>) -> ApiResult<Json<AllocationView>> {
    let exp = app.experiment(&id)?;
    let live = exp.live.read().await;
    Ok(Json(AllocationView::of(&live.state)))
}

/// Server-sent events: `id` is the sequence, `event` the event kind, `data`
/// the JSON event record. `Last-Event-ID` takes precedence over `?from`.
async fn events(
    State(app): State<Arc<App>>,
    Path(id): Path<String>,
    headers: HeaderMap,
    Query(q): Query<EventsQuery>,
) -> ApiResult<Sse<impl Stream<Item = Result<SseEvent, Infallible>>>> {
    let last_event_id = match headers.get("last-event-id") {
        Some(v) => Some(
            v.to_str()
                .ok()
                .and_then(|s| s.trim().parse::<u64>().ok())
                .ok_or_else(|| ApiError::invalid("Last-Event-ID must be a sequence number"))?,
        ),
        None => None,
    };
    let after = last_event_id.or(q.from).unwrap_or(0);
    let exp = app.experiment(&id)?;
    let stream = app.subscribe(exp, after).await?.map(|rec| {
        Ok(SseEvent::default()
            .id(rec.sequence.to_string())
            .event(rec.event.kind_name())
            .data(serde_json::to_string(&rec).expect("event serializes")))
    });
    Ok(Sse::new(stream).keep_alive(KeepAlive::new().interval(Duration::from_secs(15))))
}
