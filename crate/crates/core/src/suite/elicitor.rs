//! Application bytes that make a web server answer with data.

/// Request for a target port: a TLS ClientHello on 443, HTTP elsewhere.
pub fn elicitor(port: u16, host: &str) -> Vec<u8> {
    if port == 443 {
        tls_client_hello(host)
    } else {
        http_get(host)
    }
}

pub fn http_get(host: &str) -> Vec<u8> {
    format!("GET / HTTP/1.1\r\nHost: {host}\r\nUser-Agent: mustprobe\r\nAccept: */*\r\nConnection: close\r\n\r\n")
        .into_bytes()
}

const CIPHER_SUITES: [u16; 8] = [0x1301, 0x1302, 0x1303, 0xc02b, 0xc02f, 0xc02c, 0xc030, 0x009c];
/// ClientHello records are padded to this length (bytes after the record
/// header), which keeps them within a single small segment.
const HELLO_LEN: usize = 256;

fn push_u16(out: &mut Vec<u8>, v: u16) {
    out.extend_from_slice(&v.to_be_bytes());
}

fn extension(out: &mut Vec<u8>, kind: u16, body: &[u8]) {
    push_u16(out, kind);
    push_u16(out, body.len() as u16);
    out.extend_from_slice(body);
}

/// A fixed TLS 1.2 ClientHello with SNI, padded to a constant size. It is
/// only meant to draw a ServerHello; no handshake follows.
pub fn tls_client_hello(host: &str) -> Vec<u8> {
    let host = &host.as_bytes()[..host.len().min(128)];
    let mut ext = Vec::new();
    let mut sni = Vec::new();
    push_u16(&mut sni, host.len() as u16 + 3);
    sni.push(0);
    push_u16(&mut sni, host.len() as u16);
    sni.extend_from_slice(host);
    extension(&mut ext, 0x0000, &sni);
    // supported groups: x25519, secp256r1
    extension(&mut ext, 0x000a, &[0x00, 0x04, 0x00, 0x1d, 0x00, 0x17]);
    // signature algorithms: ecdsa_secp256r1_sha256, rsa_pss_rsae_sha256, rsa_pkcs1_sha256
    extension(&mut ext, 0x000d, &[0x00, 0x06, 0x04, 0x03, 0x08, 0x04, 0x04, 0x01]);

    let mut body = Vec::new();
    body.extend_from_slice(&[0x03, 0x03]);
    body.extend((0u8..32).map(|i| i.wrapping_mul(7).wrapping_add(0x5a)));
    body.push(0);
    push_u16(&mut body, (CIPHER_SUITES.len() * 2) as u16);
    for c in CIPHER_SUITES {
        push_u16(&mut body, c);
    }
    body.extend_from_slice(&[0x01, 0x00]);

    // handshake header (4) + body + extensions length (2) + ext + padding header (4)
    let used = 4 + body.len() + 2 + ext.len() + 4;
    let pad = HELLO_LEN.saturating_sub(used);
    extension(&mut ext, 0x0015, &vec![0; pad]);
    push_u16(&mut body, ext.len() as u16);
    body.extend_from_slice(&ext);

    let mut hs = vec![0x01];
    hs.extend_from_slice(&(body.len() as u32).to_be_bytes()[1..]);
    hs.extend_from_slice(&body);

    let mut record = vec![0x16, 0x03, 0x01];
    push_u16(&mut record, hs.len() as u16);
    record.extend_from_slice(&hs);
    record
}
