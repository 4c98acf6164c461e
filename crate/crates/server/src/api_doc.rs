//! The machine-readable API description served at `/api/spec`.

use serde_json::{json, Value};

fn op(summary: &str, responses: &[(&str, &str)]) -> Value {
    let responses: serde_json::Map<String, Value> = responses
        .iter()
        .map(|(code, desc)| (code.to_string(), json!({ "description": desc })))
        .collect();
    json!({ "summary": summary, "responses": responses })
}

fn with_params(mut op: Value, params: &[(&str, &str, bool)]) -> Value {
    op["parameters"] = params
        .iter()
        .map(|(name, place, required)| json!({"name": name, "in": place, "required": required, "schema": {"type": "string"}}))
        .collect();
    op
}

pub fn document() -> Value {
    let id = ("id", "path", true);
    json!({
        "openapi": "3.0.3",
        "info": {"title": "concept-canvas", "version": env!("CARGO_PKG_VERSION")},
        "components": {
            "securitySchemes": {"bearer": {"type": "http", "scheme": "bearer"}},
            "schemas": {
                "Error": {
                    "type": "object",
                    "required": ["code", "message", "details"],
                    "properties": {"code": {"type": "string"}, "message": {"type": "string"}, "details": {}}
                },
                "CreateRun": {
                    "type": "object",
                    "required": ["theme", "corpus"],
                    "properties": {
                        "theme": {"type": "string"},
                        "corpus": {"type": "string", "description": "corpus file path on the server"},
                        "mode": {"type": "string", "enum": ["GENERATIVE", "DIRECT"]},
                        "run_id": {"type": "string"},
                        "config": {"type": "object", "description": "dotted key to value overrides"}
                    }
                },
                "Selection": {
                    "type": "object",
                    "properties": {
                        "ids": {"type": "array", "items": {"type": "string"}},
                        "terms": {"type": "object", "properties": {
                            "positives": {"type": "array", "items": {"type": "string"}},
                            "negatives": {"type": "array", "items": {"type": "string"}}
                        }},
                        "concept_query": {"type": "string"},
                        "actor": {"type": "string"}
                    }
                },
                "Event": {
                    "type": "object",
                    "properties": {"seq": {"type": "integer"}, "stage": {"type": "string"}, "kind": {"type": "string"}, "payload": {}}
                }
            }
        },
        "paths": {
            "/runs": {
                "get": op("List run ids", &[("200", "run ids")]),
                "post": op("Create a run", &[("201", "{run_id, stage}"), ("400", "invalid body"), ("401", "bad token"), ("409", "duplicate run id")])
            },
            "/runs/{id}": {
                "get": with_params(op("Run manifest", &[("200", "manifest"), ("404", "unknown run")]), &[id])
            },
            "/runs/{id}/advance": {
                "post": with_params(op("Start the next automated stage in the background", &[
                    ("202", "stage started"), ("200", "blocked at a gate"), ("409", "run busy, done or failed"), ("404", "unknown run")
                ]), &[id])
            },
            "/runs/{id}/gates/current": {
                "get": with_params(op("Pending gate with paginated candidates", &[("200", "gate descriptor"), ("409", "no gate pending")]),
                    &[id, ("page", "query", false), ("size", "query", false)])
            },
            "/runs/{id}/gates/{gate}/selection": {
                "post": with_params(op("Resolve a gate", &[
                    ("200", "updated manifest"), ("404", "unknown gate"), ("409", "already resolved or not pending"), ("422", "arity or unknown id")
                ]), &[id, ("gate", "path", true)])
            },
            "/runs/{id}/events": {
                "get": with_params(op("Events after a cursor, long-polling up to wait_ms", &[("200", "{events, last_seq}")]),
                    &[id, ("after_seq", "query", false), ("wait_ms", "query", false)])
            },
            "/runs/{id}/artifacts/{name}": {
                "get": with_params(op("Artifact bytes; final.png aliases final/final.png", &[("200", "file"), ("404", "unknown artifact")]),
                    &[id, ("name", "path", true)])
            },
            "/runs/{id}/thumbnails/{name}": {
                "get": with_params(op("256 px thumbnail of an image artifact", &[("200", "image/png"), ("404", "unknown artifact")]),
                    &[id, ("name", "path", true)])
            },
            "/api/ui-config": {"get": op("Bootstrap settings for the studio UI", &[("200", "settings")])},
            "/api/spec": {"get": op("This document", &[("200", "document")])}
        }
    })
}
