//! Synthetic applications used by tests, the CLI and the evaluation.

use serde_json::json;

use super::AppSpec;

const S3: &str = "https://s3.amazonaws.com";
const DYNAMO: &str = "https://dynamodb.us-east-1.amazonaws.com";

pub const NAMES: &[&str] = &["photo", "retail", "pipeline", "mapreduce", "constant", "cognito"];

pub fn by_name(name: &str) -> Option<AppSpec> {
    Some(match name {
        "photo" => photo(),
        "retail" => retail(),
        "pipeline" => pipeline(),
        "mapreduce" => mapreduce(),
        "constant" => constant(),
        "cognito" => cognito(),
        _ => return None,
    })
}

fn spec(v: serde_json::Value) -> AppSpec {
    let app: AppSpec = serde_json::from_value(v).expect("fixture matches the schema");
    app.validate().expect("fixture is valid");
    app
}

fn send(url: &str, op: &str) -> serde_json::Value {
    json!({ "send": { "url": url, "op": op } })
}

fn send_n(url: &str, op: &str, repeat: serde_json::Value) -> serde_json::Value {
    json!({ "send": { "url": url, "op": op, "repeat": repeat } })
}

fn invoke(function: &str) -> serde_json::Value {
    json!({ "invoke": { "function": function } })
}

/// Users upload photos; each upload to S3 triggers post-processing.
pub fn photo() -> AppSpec {
    spec(json!({
        "name": "photo",
        "entry_functions": ["UpdatePhoto"],
        "inputs": {
            "user": { "choice": ["alice", "bob", "carol"] },
            "photo": { "choice": ["p1", "p2"] }
        },
        "functions": [
            { "name": "UpdatePhoto", "script": [
                send("https://auth.example.com/session/{input.user}", "GET"),
                send(&format!("{S3}/photos/{{input.user}}/{{input.photo}}.jpg"), "PUT"),
                "return"
            ]},
            { "name": "ProcessPhoto", "script": [
                send(&format!("{S3}/photos/{{input.user}}/{{input.photo}}.jpg"), "GET"),
                send(&format!("{S3}/thumbs/{{input.user}}/{{input.photo}}.jpg"), "PUT"),
                send(&format!("{DYNAMO}/tables/photos/{{input.user}}"), "PUT"),
                "return"
            ]}
        ],
        "services": [
            { "name": "s3", "base_url": S3, "triggers": [
                { "prefix": format!("{S3}/photos/"), "op": "PUT", "function": "ProcessPhoto" }
            ]},
            { "name": "dynamodb", "base_url": DYNAMO }
        ]
    }))
}

/// A web shop with twelve functions, explicit calls and queue, topic and
/// bucket triggers.
pub fn retail() -> AppSpec {
    let sqs = "https://sqs.us-east-1.amazonaws.com";
    let sns = "https://sns.us-east-1.amazonaws.com";
    spec(json!({
        "name": "retail",
        "entry_functions": ["ListProducts", "GetProduct", "AddToCart", "Checkout", "Recommend"],
        "inputs": {
            "user": { "choice": ["u1", "u2", "u3"] },
            "category": { "choice": ["books", "games"] },
            "item": { "choice": ["i10", "i11", "i12"] },
            "qty": { "range": [1, 3] }
        },
        "functions": [
            { "name": "ListProducts", "script": [
                send(&format!("{DYNAMO}/tables/products/{{input.category}}"), "GET"), "return"
            ]},
            { "name": "GetProduct", "script": [
                send(&format!("{DYNAMO}/tables/products/item/{{input.item}}"), "GET"),
                send(&format!("{S3}/images/{{input.item}}.jpg"), "GET"),
                "return"
            ]},
            { "name": "AddToCart", "script": [
                send(&format!("{DYNAMO}/tables/carts/{{input.user}}"), "GET"),
                send(&format!("{DYNAMO}/tables/carts/{{input.user}}"), "PUT"),
                "return"
            ]},
            { "name": "Checkout", "script": [
                send(&format!("{DYNAMO}/tables/carts/{{input.user}}"), "GET"),
                invoke("ValidateCart"),
                invoke("ProcessPayment"),
                send(&format!("{sqs}/queues/orders"), "POST"),
                "return"
            ]},
            { "name": "ValidateCart", "script": [
                send_n(&format!("{DYNAMO}/tables/inventory/{{input.item}}"), "GET", json!("qty")), "return"
            ]},
            { "name": "ProcessPayment", "script": [
                send("https://api.payments.example.com/v1/charges", "POST"),
                send(&format!("{DYNAMO}/tables/payments/{{input.user}}"), "PUT"),
                "return"
            ]},
            { "name": "CreateOrder", "script": [
                send(&format!("{DYNAMO}/tables/orders/{{input.user}}"), "PUT"),
                send(&format!("{S3}/audit/orders/{{input.user}}.json"), "PUT"),
                send(&format!("{sns}/topics/order-created"), "POST"),
                "return"
            ]},
            { "name": "SendConfirmation", "script": [
                send(&format!("{DYNAMO}/tables/users/{{input.user}}"), "GET"),
                send("https://email.us-east-1.amazonaws.com/v2/email/outbound-emails", "POST"),
                "return"
            ]},
            { "name": "UpdateInventory", "script": [
                send_n(&format!("{DYNAMO}/tables/inventory/{{input.item}}"), "PUT", json!("qty")), "return"
            ]},
            { "name": "Recommend", "script": [
                send(&format!("{DYNAMO}/tables/history/{{input.user}}"), "GET"),
                invoke("RankProducts"),
                "return"
            ]},
            { "name": "RankProducts", "script": [
                send(&format!("{S3}/models/ranker.bin"), "GET"), "return"
            ]},
            { "name": "AuditLog", "script": [
                send(&format!("{DYNAMO}/tables/audit/{{input.user}}"), "PUT"), "return"
            ]}
        ],
        "services": [
            { "name": "dynamodb", "base_url": DYNAMO },
            { "name": "s3", "base_url": S3, "triggers": [
                { "prefix": format!("{S3}/audit/"), "op": "PUT", "function": "AuditLog", "from": "CreateOrder" }
            ]},
            { "name": "sqs", "base_url": sqs, "triggers": [
                { "prefix": format!("{sqs}/queues/orders"), "op": "POST", "function": "CreateOrder" }
            ]},
            { "name": "sns", "base_url": sns, "triggers": [
                { "prefix": format!("{sns}/topics/order-created"), "op": "POST", "function": "SendConfirmation" },
                { "prefix": format!("{sns}/topics/order-created"), "op": "POST", "function": "UpdateInventory" }
            ]},
            { "name": "ses", "base_url": "https://email.us-east-1.amazonaws.com" }
        ]
    }))
}

/// A deployment pipeline whose stages run in a fixed order through a
/// workflow service.
pub fn pipeline() -> AppSpec {
    let states = "https://states.us-east-1.amazonaws.com";
    let cfn = "https://cloudformation.us-east-1.amazonaws.com";
    spec(json!({
        "name": "pipeline",
        "entry_functions": ["StartPipeline"],
        "inputs": { "stack": { "choice": ["web", "api"] } },
        "functions": [
            { "name": "StartPipeline", "script": [
                send(&format!("{S3}/artifacts/{{input.stack}}.zip"), "PUT"),
                send(&format!("{states}/executions/create-change-set"), "POST"),
                "return"
            ]},
            { "name": "CreateChangeSet", "script": [
                send(&format!("{S3}/artifacts/{{input.stack}}.zip"), "GET"),
                send(&format!("{cfn}/stacks/{{input.stack}}/change-sets"), "POST"),
                send(&format!("{states}/executions/execute-change-set"), "POST"),
                "return"
            ]},
            { "name": "ExecuteChangeSet", "script": [
                send(&format!("{cfn}/stacks/{{input.stack}}/change-sets/execute"), "POST"),
                send(&format!("{states}/executions/notify"), "POST"),
                "return"
            ]},
            { "name": "NotifyComplete", "script": [
                send("https://sns.us-east-1.amazonaws.com/topics/deployments", "POST"),
                "return"
            ]}
        ],
        "services": [
            { "name": "s3", "base_url": S3 },
            { "name": "cloudformation", "base_url": cfn },
            { "name": "sns", "base_url": "https://sns.us-east-1.amazonaws.com" },
            { "name": "stepfunctions", "base_url": states, "triggers": [
                { "prefix": format!("{states}/executions/create-change-set"), "op": "POST", "function": "CreateChangeSet", "from": "StartPipeline" },
                { "prefix": format!("{states}/executions/execute-change-set"), "op": "POST", "function": "ExecuteChangeSet", "from": "CreateChangeSet" },
                { "prefix": format!("{states}/executions/notify"), "op": "POST", "function": "NotifyComplete", "from": "ExecuteChangeSet" }
            ]}
        ]
    }))
}

/// A driver reads 1 to 9 input files and fans out one mapper per file.
pub fn mapreduce() -> AppSpec {
    spec(json!({
        "name": "mapreduce",
        "entry_functions": ["Driver"],
        "inputs": {
            "dataset": { "choice": ["clicks", "views"] },
            "files": { "range": [1, 9] }
        },
        "functions": [
            { "name": "Driver", "script": [
                send_n(&format!("{S3}/datasets/{{input.dataset}}/file-{{i}}"), "GET", json!("files")),
                { "invoke": { "function": "Mapper", "repeat": "files" } },
                "return"
            ]},
            { "name": "Mapper", "script": [
                send(&format!("{S3}/datasets/{{input.dataset}}/file-{{idx}}"), "GET"),
                send(&format!("{S3}/intermediate/{{input.dataset}}/part-0000{{idx}}"), "PUT"),
                "return"
            ]},
            { "name": "Coordinator", "script": [
                send(&format!("{DYNAMO}/tables/jobs/{{input.dataset}}"), "PUT"),
                invoke("Reducer"),
                "return"
            ]},
            { "name": "Reducer", "script": [
                send(&format!("{S3}/intermediate/{{input.dataset}}"), "GET"),
                send(&format!("{S3}/output/{{input.dataset}}/result"), "PUT"),
                "return"
            ]}
        ],
        "services": [
            { "name": "s3", "base_url": S3, "triggers": [
                { "prefix": format!("{S3}/intermediate/"), "op": "PUT", "function": "Coordinator", "from": "Mapper" }
            ]},
            { "name": "dynamodb", "base_url": DYNAMO }
        ]
    }))
}

/// Two functions whose flows do not depend on the input.
pub fn constant() -> AppSpec {
    spec(json!({
        "name": "constant",
        "entry_functions": ["Ping"],
        "inputs": { "user": { "choice": ["a", "b", "c"] } },
        "functions": [
            { "name": "Ping", "script": [
                send("https://api.example.com/status", "GET"),
                send(&format!("{DYNAMO}/tables/health"), "PUT"),
                invoke("Pong"),
                "return"
            ]},
            { "name": "Pong", "script": [
                send(&format!("{S3}/logs/pong.txt"), "PUT"),
                "return"
            ]}
        ],
        "services": [
            { "name": "s3", "base_url": S3 },
            { "name": "dynamodb", "base_url": DYNAMO }
        ]
    }))
}

/// Real username, password and access token of the [`cognito`] fixture.
pub const COGNITO_SECRETS: &[&str] = &["test-user-7", "s3cret-Pa55", "tokREAL0123456789"];

/// A function that logs in to an identity provider and lists devices
/// with the token. Its code only ever holds placeholders.
pub fn cognito() -> AppSpec {
    let idp = "https://cognito-idp.us-east-1.amazonaws.com";
    let [user, pass, token] = [COGNITO_SECRETS[0], COGNITO_SECRETS[1], COGNITO_SECRETS[2]];
    spec(json!({
        "name": "cognito",
        "entry_functions": ["ListMyDevices"],
        "functions": [
            { "name": "ListMyDevices", "script": [
                { "send": {
                    "url": format!("{idp}/"), "op": "POST",
                    "headers": { "X-Amz-Target": "AWSCognitoIdentityProviderService.InitiateAuth", "Content-Type": "application/x-amz-json-1.1" },
                    "body": r#"{"AuthFlow":"USER_PASSWORD_AUTH","ClientId":"app-client","AuthParameters":{"USERNAME":"placeholder","PASSWORD":"placeholder"}}"#,
                    "capture": { "name": "token", "regex": r#""AccessToken":"([^"]+)""# }
                }},
                { "send": {
                    "url": format!("{idp}/"), "op": "POST",
                    "headers": { "X-Amz-Target": "AWSCognitoIdentityProviderService.ListDevices", "Content-Type": "application/x-amz-json-1.1" },
                    "body": r#"{"AccessToken":"{var.token}","Limit":10}"#
                }},
                { "send": {
                    "url": format!("{S3}/reports/devices.json"), "op": "PUT",
                    "body": r#"{"count":0}"#
                }},
                "return"
            ]}
        ],
        "services": [
            { "name": "cognito", "base_url": idp, "responses": [
                { "prefix": idp, "op": "InitiateAuth",
                  "require": [format!("\"USERNAME\":\"{user}\""), format!("\"PASSWORD\":\"{pass}\"")],
                  "body": format!(r#"{{"AuthenticationResult":{{"AccessToken":"{token}","ExpiresIn":3600}}}}"#) },
                { "prefix": idp, "op": "ListDevices", "require": [token], "body": r#"{"Devices":[]}"# }
            ]},
            { "name": "s3", "base_url": S3 }
        ],
        "credentials": {
            "ListMyDevices": {
                "auth_url": format!("{idp}/"),
                "auth_op": "InitiateAuth",
                "credentials": { "username": user, "password": pass },
                "template": r#"{"AuthFlow":"USER_PASSWORD_AUTH","ClientId":"{{orig:ClientId}}","AuthParameters":{"USERNAME":"{{cred:username}}","PASSWORD":"{{cred:password}}"}}"#,
                "token_extractor": r#""AccessToken":"([^"]+)""#,
                "other_reqs": [{ "url": format!("{idp}/"), "op": "ListDevices" }]
            }
        }
    }))
}
