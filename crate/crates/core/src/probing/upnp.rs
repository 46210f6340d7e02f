//! UPnP IGD query for the CPE's WAN address: SSDP discovery, device
//! description fetch and the `GetExternalIPAddress` SOAP action.
//!
//! Every failure collapses to "unavailable"; errors are only surfaced by the
//! lower-level helpers so they can be logged and tested.

use std::io::{BufRead, BufReader, Read, Write};
use std::net::{Ipv4Addr, SocketAddr, TcpStream, ToSocketAddrs, UdpSocket};
use std::time::{Duration, Instant};

use thiserror::Error;
use url::Url;

pub const SSDP_MULTICAST: &str = "239.255.255.250:1900";
pub const IGD_SEARCH_TARGET: &str = "urn:schemas-upnp-org:device:InternetGatewayDevice:1";
const WAN_SERVICES: [&str; 2] = [
    "urn:schemas-upnp-org:service:WANIPConnection:",
    "urn:schemas-upnp-org:service:WANPPPConnection:",
];

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum UpnpError {
    #[error("no SSDP answer from an internet gateway device")]
    NoGateway,
    #[error("gateway describes no WAN connection service")]
    NoWanService,
    #[error("SOAP fault: {0}")]
    SoapFault(String),
    #[error("bad response: {0}")]
    BadResponse(String),
    #[error("I/O error: {0}")]
    Io(String),
}

impl From<std::io::Error> for UpnpError {
    fn from(e: std::io::Error) -> Self {
        UpnpError::Io(e.to_string())
    }
}

pub fn msearch_request(mx_secs: u32) -> String {
    format!(
        "M-SEARCH * HTTP/1.1\r\nHOST: {SSDP_MULTICAST}\r\nMAN: \"ssdp:discover\"\r\nMX: {mx_secs}\r\nST: {IGD_SEARCH_TARGET}\r\n\r\n"
    )
}

/// Extracts the LOCATION header of an SSDP search response for an IGD.
pub fn parse_ssdp_response(response: &str) -> Option<Url> {
    let mut lines = response.lines();
    let status = lines.next()?;
    if !status.starts_with("HTTP/1.1 200") && !status.starts_with("HTTP/1.0 200") {
        return None;
    }
    let mut location = None;
    let mut is_igd = false;
    for line in lines {
        let Some((name, value)) = line.split_once(':') else { continue };
        let value = value.trim();
        match name.trim().to_ascii_lowercase().as_str() {
            "location" => location = Url::parse(value).ok(),
            "st" => is_igd = value.starts_with("urn:schemas-upnp-org:device:InternetGatewayDevice:"),
            _ => {}
        }
    }
    location.filter(|_| is_igd)
}

/// Text of every `<tag>...</tag>` element, namespace prefixes ignored.
fn elements<'a>(xml: &'a str, tag: &'a str) -> impl Iterator<Item = &'a str> + 'a {
    let mut rest = xml;
    std::iter::from_fn(move || loop {
        let open = rest.find('<')?;
        let after = &rest[open + 1..];
        let close = after.find('>')?;
        let name = after[..close].split_whitespace().next().unwrap_or("");
        rest = &after[close + 1..];
        if name.starts_with('/') || name.ends_with('/') {
            continue;
        }
        let local = name.rsplit(':').next().unwrap_or(name);
        if local != tag {
            continue;
        }
        let end = rest.find(&format!("</{name}>"))?;
        let inner = &rest[..end];
        rest = &rest[end..];
        return Some(inner.trim());
    })
}

/// Finds the WANIPConnection or WANPPPConnection service in a device
/// description, returning its service type and absolute control URL.
pub fn find_wan_service(description: &str, base: &Url) -> Result<(String, Url), UpnpError> {
    let url_base = elements(description, "URLBase")
        .next()
        .and_then(|b| Url::parse(b).ok())
        .unwrap_or_else(|| base.clone());
    for service in elements(description, "service") {
        let Some(service_type) = elements(service, "serviceType").next() else { continue };
        if !WAN_SERVICES.iter().any(|p| service_type.starts_with(p)) {
            continue;
        }
        let control = elements(service, "controlURL")
            .next()
            .ok_or_else(|| UpnpError::BadResponse("service without controlURL".into()))?;
        let url = url_base
            .join(control)
            .map_err(|e| UpnpError::BadResponse(format!("bad controlURL {control:?}: {e}")))?;
        return Ok((service_type.to_owned(), url));
    }
    Err(UpnpError::NoWanService)
}

pub fn get_external_ip_envelope(service_type: &str) -> String {
    format!(
        "<?xml version=\"1.0\"?>\r\n\
         <s:Envelope xmlns:s=\"http://schemas.xmlsoap.org/soap/envelope/\" \
         s:encodingStyle=\"http://schemas.xmlsoap.org/soap/encoding/\">\
         <s:Body><u:GetExternalIPAddress xmlns:u=\"{service_type}\"></u:GetExternalIPAddress></s:Body>\
         </s:Envelope>\r\n"
    )
}

/// Reads `NewExternalIPAddress` from a SOAP response; faults become errors.
pub fn parse_external_ip_response(body: &str) -> Result<Ipv4Addr, UpnpError> {
    if elements(body, "Fault").next().is_some() {
        let reason = elements(body, "errorDescription")
            .next()
            .or_else(|| elements(body, "faultstring").next())
            .unwrap_or("unspecified");
        return Err(UpnpError::SoapFault(reason.to_owned()));
    }
    let value = elements(body, "NewExternalIPAddress")
        .next()
        .ok_or_else(|| UpnpError::BadResponse("no NewExternalIPAddress".into()))?;
    value.parse().map_err(|_| UpnpError::BadResponse(format!("not an IPv4 address: {value:?}")))
}

struct HttpResponse {
    status: u16,
    body: String,
}

fn decode_chunked(raw: &[u8]) -> Result<Vec<u8>, UpnpError> {
    let mut out = Vec::new();
    let mut reader = BufReader::new(raw);
    loop {
        let mut size_line = String::new();
        reader.read_line(&mut size_line)?;
        let size_hex = size_line.trim().split(';').next().unwrap_or("");
        let size = usize::from_str_radix(size_hex, 16)
            .map_err(|_| UpnpError::BadResponse(format!("bad chunk size {size_hex:?}")))?;
        if size == 0 {
            return Ok(out);
        }
        let mut chunk = vec![0; size + 2];
        reader.read_exact(&mut chunk)?;
        out.extend_from_slice(&chunk[..size]);
    }
}

fn http_request(url: &Url, method: &str, headers: &[(&str, String)], body: &str, timeout: Duration) -> Result<HttpResponse, UpnpError> {
    let host = url.host_str().ok_or_else(|| UpnpError::BadResponse(format!("no host in {url}")))?;
    let port = url.port_or_known_default().unwrap_or(80);
    let addr: SocketAddr = (host, port)
        .to_socket_addrs()?
        .next()
        .ok_or_else(|| UpnpError::Io(format!("cannot resolve {host}")))?;
    let mut stream = TcpStream::connect_timeout(&addr, timeout)?;
    stream.set_read_timeout(Some(timeout))?;
    stream.set_write_timeout(Some(timeout))?;

    let path = match url.query() {
        Some(q) => format!("{}?{q}", url.path()),
        None => url.path().to_owned(),
    };
    let mut request = format!("{method} {path} HTTP/1.1\r\nHost: {host}:{port}\r\nConnection: close\r\n");
    for (name, value) in headers {
        request.push_str(&format!("{name}: {value}\r\n"));
    }
    request.push_str(&format!("Content-Length: {}\r\n\r\n{body}", body.len()));
    stream.write_all(request.as_bytes())?;

    let mut raw = Vec::new();
    stream.read_to_end(&mut raw)?;
    let split = raw
        .windows(4)
        .position(|w| w == b"\r\n\r\n")
        .ok_or_else(|| UpnpError::BadResponse("no end of HTTP headers".into()))?;
    let head = String::from_utf8_lossy(&raw[..split]).into_owned();
    let mut payload = raw[split + 4..].to_vec();
    let status = head
        .split_whitespace()
        .nth(1)
        .and_then(|s| s.parse().ok())
        .ok_or_else(|| UpnpError::BadResponse("no HTTP status".into()))?;
    let chunked = head.lines().any(|l| {
        l.split_once(':').is_some_and(|(n, v)| {
            n.trim().eq_ignore_ascii_case("transfer-encoding") && v.trim().eq_ignore_ascii_case("chunked")
        })
    });
    if chunked {
        payload = decode_chunked(&payload)?;
    }
    Ok(HttpResponse { status, body: String::from_utf8_lossy(&payload).into_owned() })
}

#[derive(Debug, Clone)]
pub struct UpnpClient {
    pub timeout: Duration,
}

impl Default for UpnpClient {
    fn default() -> Self {
        UpnpClient { timeout: Duration::from_secs(3) }
    }
}

impl UpnpClient {
    /// Multicasts an M-SEARCH and returns the first IGD description URL.
    pub fn discover(&self) -> Result<Url, UpnpError> {
        let socket = UdpSocket::bind("0.0.0.0:0")?;
        socket.set_multicast_ttl_v4(1)?;
        let mx = self.timeout.as_secs().clamp(1, 5) as u32;
        socket.send_to(msearch_request(mx).as_bytes(), SSDP_MULTICAST)?;
        let deadline = Instant::now() + self.timeout;
        let mut buf = [0u8; 2048];
        while let Some(left) = deadline.checked_duration_since(Instant::now()).filter(|d| !d.is_zero()) {
            socket.set_read_timeout(Some(left))?;
            match socket.recv_from(&mut buf) {
                Ok((n, _)) => {
                    if let Some(url) = parse_ssdp_response(&String::from_utf8_lossy(&buf[..n])) {
                        return Ok(url);
                    }
                }
                Err(e) if matches!(e.kind(), std::io::ErrorKind::WouldBlock | std::io::ErrorKind::TimedOut) => break,
                Err(e) => return Err(e.into()),
            }
        }
        Err(UpnpError::NoGateway)
    }

    /// Fetches the description at `location` and asks the WAN service for
    /// its external address.
    pub fn external_ip_via(&self, location: &Url) -> Result<Ipv4Addr, UpnpError> {
        let description = http_request(location, "GET", &[], "", self.timeout)?;
        if description.status != 200 {
            return Err(UpnpError::BadResponse(format!("description fetch returned {}", description.status)));
        }
        let (service_type, control) = find_wan_service(&description.body, location)?;
        let headers = [
            ("Content-Type", "text/xml; charset=\"utf-8\"".to_owned()),
            ("SOAPAction", format!("\"{service_type}#GetExternalIPAddress\"")),
        ];
        let response = http_request(&control, "POST", &headers, &get_external_ip_envelope(&service_type), self.timeout)?;
        // faults arrive with status 500 and a SOAP body
        parse_external_ip_response(&response.body)
    }

    pub fn query(&self) -> Result<Ipv4Addr, UpnpError> {
        self.external_ip_via(&self.discover()?)
    }

    /// The CPE's reported WAN address, or `None` for any failure.
    pub fn query_wan_ip(&self) -> Option<Ipv4Addr> {
        match self.query() {
            Ok(ip) => Some(ip),
            Err(e) => {
                log::debug!("UPnP unavailable: {e}");
                None
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    pub(crate) const DESCRIPTION: &str = r#"<?xml version="1.0"?>
<root xmlns="urn:schemas-upnp-org:device-1-0">
  <device>
    <deviceType>urn:schemas-upnp-org:device:InternetGatewayDevice:1</deviceType>
    <serviceList>
      <service>
        <serviceType>urn:schemas-upnp-org:service:Layer3Forwarding:1</serviceType>
        <controlURL>/ctl/L3F</controlURL>
      </service>
    </serviceList>
    <deviceList><device><deviceList><device>
      <serviceList>
        <service>
          <serviceType>urn:schemas-upnp-org:service:WANIPConnection:1</serviceType>
          <serviceId>urn:upnp-org:serviceId:WANIPConn1</serviceId>
          <controlURL>/ctl/IPConn</controlURL>
        </service>
      </serviceList>
    </device></deviceList></device></deviceList>
  </device>
</root>"#;

    #[test]
    fn msearch_targets_igd() {
        let req = msearch_request(2);
        assert!(req.starts_with("M-SEARCH * HTTP/1.1\r\n"));
        assert!(req.contains("HOST: 239.255.255.250:1900\r\n"));
        assert!(req.contains("ST: urn:schemas-upnp-org:device:InternetGatewayDevice:1\r\n"));
        assert!(req.ends_with("\r\n\r\n"));
    }

    #[test]
    fn ssdp_response_location() {
        let resp = "HTTP/1.1 200 OK\r\nCACHE-CONTROL: max-age=120\r\nST: urn:schemas-upnp-org:device:InternetGatewayDevice:1\r\nLocation: http://192.168.1.1:5000/rootDesc.xml\r\n\r\n";
        assert_eq!(parse_ssdp_response(resp).unwrap().as_str(), "http://192.168.1.1:5000/rootDesc.xml");
        let other = resp.replace("InternetGatewayDevice", "MediaRenderer");
        assert!(parse_ssdp_response(&other).is_none());
        assert!(parse_ssdp_response("NOTIFY * HTTP/1.1\r\n\r\n").is_none());
    }

    #[test]
    fn finds_nested_wan_service() {
        let base = Url::parse("http://192.168.1.1:5000/rootDesc.xml").unwrap();
        let (st, url) = find_wan_service(DESCRIPTION, &base).unwrap();
        assert_eq!(st, "urn:schemas-upnp-org:service:WANIPConnection:1");
        assert_eq!(url.as_str(), "http://192.168.1.1:5000/ctl/IPConn");
    }

    #[test]
    fn ppp_service_and_url_base() {
        let desc = r#"<root><URLBase>http://10.0.0.138:49152/</URLBase><device><serviceList><service>
            <serviceType>urn:schemas-upnp-org:service:WANPPPConnection:1</serviceType>
            <controlURL>upnp/control/WANPPPConn1</controlURL></service></serviceList></device></root>"#;
        let base = Url::parse("http://10.0.0.138:1900/igd.xml").unwrap();
        let (st, url) = find_wan_service(desc, &base).unwrap();
        assert!(st.contains("WANPPPConnection"));
        assert_eq!(url.as_str(), "http://10.0.0.138:49152/upnp/control/WANPPPConn1");
    }

    #[test]
    fn description_without_wan_service() {
        let base = Url::parse("http://192.168.1.1/").unwrap();
        let desc = "<root><device><serviceList></serviceList></device></root>";
        assert_eq!(find_wan_service(desc, &base), Err(UpnpError::NoWanService));
    }

    #[test]
    fn soap_response_parsing() {
        let ok = r#"<?xml version="1.0"?><s:Envelope xmlns:s="http://schemas.xmlsoap.org/soap/envelope/"><s:Body>
            <u:GetExternalIPAddressResponse xmlns:u="urn:schemas-upnp-org:service:WANIPConnection:1">
            <NewExternalIPAddress>100.64.12.3</NewExternalIPAddress></u:GetExternalIPAddressResponse></s:Body></s:Envelope>"#;
        assert_eq!(parse_external_ip_response(ok).unwrap(), Ipv4Addr::new(100, 64, 12, 3));

        let fault = r#"<s:Envelope><s:Body><s:Fault><faultcode>s:Client</faultcode><faultstring>UPnPError</faultstring>
            <detail><UPnPError><errorCode>501</errorCode><errorDescription>Action Failed</errorDescription></UPnPError></detail>
            </s:Fault></s:Body></s:Envelope>"#;
        assert_eq!(parse_external_ip_response(fault), Err(UpnpError::SoapFault("Action Failed".into())));

        let garbage = "<NewExternalIPAddress>not-an-ip</NewExternalIPAddress>";
        assert!(matches!(parse_external_ip_response(garbage), Err(UpnpError::BadResponse(_))));
    }

    #[test]
    fn envelope_names_the_action() {
        let env = get_external_ip_envelope("urn:schemas-upnp-org:service:WANIPConnection:1");
        assert!(env.contains(r#"<u:GetExternalIPAddress xmlns:u="urn:schemas-upnp-org:service:WANIPConnection:1">"#));
    }

    #[test]
    fn chunked_bodies() {
        let raw = b"5\r\nhello\r\n6;ext=1\r\n world\r\n0\r\n\r\n";
        assert_eq!(decode_chunked(raw).unwrap(), b"hello world");
    }
}
