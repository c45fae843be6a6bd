//! Hand-written OpenAPI description served at `/api/spec`.

use serde_json::{json, Value};

fn err(desc: &str) -> Value {
    json!({ "description": desc, "content": { "application/json": { "schema": { "$ref": "#/components/schemas/Error" } } } })
}

fn ok_json(desc: &str, schema: Value) -> Value {
    json!({ "description": desc, "content": { "application/json": { "schema": schema } } })
}

fn id_param(name: &str) -> Value {
    json!({ "name": name, "in": "path", "required": true, "schema": { "type": "string" } })
}

pub fn document() -> Value {
    json!({
        "openapi": "3.0.3",
        "info": { "title": "templeak triage API", "version": env!("CARGO_PKG_VERSION") },
        "components": {
            "securitySchemes": { "bearer": { "type": "http", "scheme": "bearer" } },
            "schemas": {
                "Error": { "type": "object", "properties": { "error": { "type": "string" } }, "required": ["error"] },
                "Group": {
                    "type": "object",
                    "properties": {
                        "group_id": { "type": "string" },
                        "collocation": { "type": "string" },
                        "members": { "type": "array", "items": { "type": "string" } },
                        "min_pairwise": { "type": "number" },
                        "fingerprint_digest": { "type": "string" },
                        "status": { "type": "string", "enum": ["suspected", "confirmed", "rejected"] }
                    }
                },
                "Finding": {
                    "type": "object",
                    "properties": {
                        "v": { "type": "integer" },
                        "kind": { "type": "string", "enum": ["template_memorized", "perturbed", "leakage", "interpolation", "source_match", "probe"] },
                        "subject": { "type": "string" },
                        "score": { "type": "number" },
                        "evidence": { "type": "object" }
                    }
                },
                "VerdictRequest": {
                    "type": "object",
                    "required": ["group_id", "decision", "analyst"],
                    "properties": {
                        "group_id": { "type": "string" },
                        "decision": { "type": "string", "enum": ["confirmed", "rejected", "leakage_confirmed"] },
                        "analyst": { "type": "string" },
                        "note": { "type": "string" }
                    }
                },
                "PromoteRequest": {
                    "type": "object",
                    "required": ["run_id", "group_ids", "target_provider_id"],
                    "properties": {
                        "run_id": { "type": "string" },
                        "group_ids": { "type": "array", "items": { "type": "string" } },
                        "target_provider_id": { "type": "string" }
                    }
                }
            }
        },
        "security": [{ "bearer": [] }],
        "paths": {
            "/api/runs": { "get": { "summary": "List runs", "responses": { "200": ok_json("Run summaries", json!({ "type": "array", "items": { "type": "object" } })) } } },
            "/api/runs/{id}": { "get": {
                "summary": "Run detail", "parameters": [id_param("id")],
                "responses": { "200": ok_json("Run", json!({ "type": "object" })), "404": err("Unknown run") }
            } },
            "/api/runs/{id}/groups": { "get": {
                "summary": "Detected groups with triage status", "parameters": [id_param("id")],
                "responses": { "200": ok_json("Groups", json!({ "type": "array", "items": { "$ref": "#/components/schemas/Group" } })), "404": err("Unknown run") }
            } },
            "/api/runs/{id}/findings": { "get": {
                "summary": "Findings in file order", "parameters": [id_param("id")],
                "responses": { "200": ok_json("Findings", json!({ "type": "array", "items": { "$ref": "#/components/schemas/Finding" } })), "404": err("Unknown run") }
            } },
            "/api/groups/{gid}": { "get": {
                "summary": "Group detail with masks, linked findings and verdicts", "parameters": [id_param("gid")],
                "responses": { "200": ok_json("Group", json!({ "type": "object" })), "404": err("Unknown group") }
            } },
            "/api/images/{digest}": { "get": {
                "summary": "Stored PNG", "parameters": [id_param("digest")],
                "responses": { "200": { "description": "PNG bytes", "content": { "image/png": {} } }, "404": err("Unknown image") }
            } },
            "/api/verdicts": { "post": {
                "summary": "Record an analyst verdict",
                "requestBody": { "required": true, "content": { "application/json": { "schema": { "$ref": "#/components/schemas/VerdictRequest" } } } },
                "responses": {
                    "201": ok_json("Recorded", json!({ "type": "object" })),
                    "400": err("Invalid decision"), "404": err("Unknown group"), "409": err("Run cannot take appends")
                }
            } },
            "/api/sweeps/promote": { "post": {
                "summary": "Build a sweep config from confirmed groups",
                "requestBody": { "required": true, "content": { "application/json": { "schema": { "$ref": "#/components/schemas/PromoteRequest" } } } },
                "responses": {
                    "201": ok_json("Generated config", json!({ "type": "object" })),
                    "400": err("Empty group list"), "404": err("Unknown run"),
                    "409": err("Run cannot take appends"), "422": err("Group not confirmed")
                }
            } },
            "/api/spec": { "get": { "summary": "This document", "security": [], "responses": { "200": ok_json("OpenAPI", json!({ "type": "object" })) } } }
        }
    })
}
