mod support;

use std::sync::Arc;
use std::time::{Duration, Instant};

use labpipe_agent::runtime::AgentRuntime;
use support::{form, write_file, Env};

#[test]
fn background_loops_deliver() {
    let env = Env::new();
    env.install("P", "change_detection");
    let agent = Arc::new(env.agent(Arc::new(env.local()), None));
    let runtime = AgentRuntime::start(agent.clone(), Duration::from_millis(20), Duration::from_millis(20));
    let deadline = Instant::now() + Duration::from_secs(5);
    while agent.protocol("P").is_none() && Instant::now() < deadline {
        std::thread::sleep(Duration::from_millis(10));
    }
    let sid = agent.start_session("P").unwrap().session_id;
    agent.submit_form(&sid, &form("P1")).unwrap();
    write_file(&env.watch("P").join("a.raw"), b"payload", 3);
    while env.server_state() != (1, 1, 1) && Instant::now() < deadline {
        std::thread::sleep(Duration::from_millis(10));
    }
    runtime.stop();
    assert_eq!(env.server_state(), (1, 1, 1));
}
